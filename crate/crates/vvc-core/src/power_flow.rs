//! Nonlinear plant model: backward/forward sweep power flow.
//!
//! Regulators are ideal per-phase transformers ahead of the branch
//! impedance: the child side sees `t∘V_parent - z·J` and the parent side
//! sources `t∘J`, so power passes through the tap changer unchanged and all
//! branch loss lands in `z`. Capacitor banks and inverters inject constant
//! power. Loads consume constant power.

use crate::feeder::{DeviceIndex, Feeder, FeederError, FeederIndex};
use crate::linear_flow::{check_taps, Injections, LinearFlowError};
use nalgebra::DVector;
use num_complex::Complex64;

#[derive(Debug, thiserror::Error)]
pub enum PlantError {
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Input(#[from] LinearFlowError),
    #[error("sweep did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct PlantConfig {
    /// Max phasor change between sweeps that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantState {
    /// Complex bus voltages per bus-phase slot.
    pub v_phasor: Vec<Complex64>,
    /// Squared voltage magnitudes per bus-phase slot, pu².
    pub v: DVector<f64>,
    /// Branch currents per branch-phase slot, flowing into the child bus.
    pub branch_current: Vec<Complex64>,
    /// Total series loss, pu.
    pub losses: f64,
    pub iterations: usize,
}

impl PlantState {
    pub fn voltage_magnitudes(&self) -> DVector<f64> {
        self.v.map(f64::sqrt)
    }
}

/// Slack phasor for a phase: magnitude from the squared setpoint, angle from
/// the balanced reference.
fn slack_phasor(feeder: &Feeder, pos: usize) -> Complex64 {
    let p = feeder.buses[0].phases.iter().nth(pos).unwrap();
    p.unit_phasor() * feeder.v0[pos].sqrt()
}

/// Turns ratio per branch-phase slot, 1.0 where no regulator acts.
fn turns_ratios(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    taps: &[i32],
) -> Vec<f64> {
    let tap_bp = devices.taps_to_branch_phase(feeder, idx, taps);
    let mut t = vec![1.0; idx.n_branch_phases()];
    for (k, br) in feeder.branches.iter().enumerate() {
        if let Some(reg) = &br.regulator {
            for slot in idx.branch_slots(k) {
                t[slot] = 1.0 + tap_bp[slot] as f64 * reg.tap_step;
            }
        }
    }
    t
}

pub fn solve_plant(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    inj: &Injections,
    taps: &[i32],
    config: &PlantConfig,
) -> Result<PlantState, PlantError> {
    check_taps(devices, taps)?;
    let nbp = idx.n_bus_phases();
    let nfp = idx.n_branch_phases();
    let t = turns_ratios(feeder, idx, devices, taps);

    // Net constant-power consumption per bus-phase slot.
    let s_net: Vec<Complex64> = (0..nbp)
        .map(|i| {
            Complex64::new(
                inj.p_c[i] - inj.p_inv[i],
                inj.q_c[i] - inj.q_inv[i] - inj.q_cap[i],
            )
        })
        .collect();

    // Flat start at the slack magnitude, rotated per phase.
    let mut v: Vec<Complex64> = (0..nbp)
        .map(|i| {
            let (_, p) = idx.slot_bus_phase(i);
            let pos = feeder.buses[0].phases.position(p).unwrap();
            slack_phasor(feeder, pos)
        })
        .collect();
    let mut j = vec![Complex64::ZERO; nfp];

    for iter in 1..=config.max_iter {
        // Backward: accumulate currents from the leaves toward the slack.
        for k in (0..feeder.branches.len()).rev() {
            let br = &feeder.branches[k];
            for p in br.phases.iter() {
                let slot = idx.branch_phase_slot(feeder, k, p).unwrap();
                let bus_slot = idx.bus_phase_slot(feeder, br.to_bus, p).unwrap();
                let mut cur = (s_net[bus_slot] / v[bus_slot]).conj();
                for &m in idx.child_branches(br.to_bus) {
                    if let Some(ms) = idx.branch_phase_slot(feeder, m, p) {
                        cur += t[ms] * j[ms];
                    }
                }
                j[slot] = cur;
            }
        }

        // Forward: propagate voltages from the slack toward the leaves.
        let mut residual = 0.0f64;
        for (k, br) in feeder.branches.iter().enumerate() {
            let phases: Vec<_> = br.phases.iter().collect();
            for (i, &p) in phases.iter().enumerate() {
                let upstream = if br.from_bus == 0 {
                    slack_phasor(feeder, feeder.buses[0].phases.position(p).unwrap())
                } else {
                    v[idx.bus_phase_slot(feeder, br.from_bus, p).unwrap()]
                };
                let slot = idx.branch_phase_slot(feeder, k, p).unwrap();
                let mut vnew = t[slot] * upstream;
                for (jj, &q) in phases.iter().enumerate() {
                    let qs = idx.branch_phase_slot(feeder, k, q).unwrap();
                    vnew -= br.z[(i, jj)] * j[qs];
                }
                let bus_slot = idx.bus_phase_slot(feeder, br.to_bus, p).unwrap();
                residual = residual.max((vnew - v[bus_slot]).norm());
                v[bus_slot] = vnew;
            }
        }

        if residual <= config.tol {
            let losses = series_losses(feeder, idx, &t, &v, &j);
            return Ok(PlantState {
                v: DVector::from_iterator(nbp, v.iter().map(|c| c.norm_sqr())),
                v_phasor: v,
                branch_current: j,
                losses,
                iterations: iter,
            });
        }
    }

    // One more backward pass to measure the final mismatch honestly.
    let residual = {
        let mut worst = 0.0f64;
        for (k, br) in feeder.branches.iter().enumerate() {
            for p in br.phases.iter() {
                let slot = idx.branch_phase_slot(feeder, k, p).unwrap();
                let bus_slot = idx.bus_phase_slot(feeder, br.to_bus, p).unwrap();
                let upstream = if br.from_bus == 0 {
                    slack_phasor(feeder, feeder.buses[0].phases.position(p).unwrap())
                } else {
                    v[idx.bus_phase_slot(feeder, br.from_bus, p).unwrap()]
                };
                let mut rhs = t[slot] * upstream;
                for q in br.phases.iter() {
                    let qs = idx.branch_phase_slot(feeder, k, q).unwrap();
                    let i = br.phases.position(p).unwrap();
                    let jj = br.phases.position(q).unwrap();
                    rhs -= br.z[(i, jj)] * j[qs];
                }
                worst = worst.max((rhs - v[bus_slot]).norm());
            }
        }
        worst
    };
    Err(PlantError::NotConverged {
        iterations: config.max_iter,
        residual,
    })
}

fn series_losses(
    feeder: &Feeder,
    idx: &FeederIndex,
    t: &[f64],
    v: &[Complex64],
    j: &[Complex64],
) -> f64 {
    let mut total = 0.0;
    for (k, br) in feeder.branches.iter().enumerate() {
        for p in br.phases.iter() {
            let slot = idx.branch_phase_slot(feeder, k, p).unwrap();
            let upstream = if br.from_bus == 0 {
                slack_phasor(feeder, feeder.buses[0].phases.position(p).unwrap())
            } else {
                v[idx.bus_phase_slot(feeder, br.from_bus, p).unwrap()]
            };
            let downstream = v[idx.bus_phase_slot(feeder, br.to_bus, p).unwrap()];
            total += ((t[slot] * upstream - downstream) * j[slot].conj()).re;
        }
    }
    total
}

/// Recomputes total series loss from a solved state. Independent entry point
/// so downstream reports do not trust the solver's own bookkeeping.
pub fn compute_losses(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    state: &PlantState,
    taps: &[i32],
) -> f64 {
    let t = turns_ratios(feeder, idx, devices, taps);
    series_losses(feeder, idx, &t, &state.v_phasor, &state.branch_current)
}

/// Real power drawn from the slack bus, measured on the primary side of any
/// first-hop regulators.
pub fn slack_power(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    state: &PlantState,
    taps: &[i32],
) -> f64 {
    let t = turns_ratios(feeder, idx, devices, taps);
    let mut total = 0.0;
    for &k in idx.child_branches(0) {
        let br = &feeder.branches[k];
        for p in br.phases.iter() {
            let slot = idx.branch_phase_slot(feeder, k, p).unwrap();
            let v0 = slack_phasor(feeder, feeder.buses[0].phases.position(p).unwrap());
            total += (v0 * (t[slot] * state.branch_current[slot]).conj()).re;
        }
    }
    total
}

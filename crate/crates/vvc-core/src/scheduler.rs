//! Upper layer: receding-horizon scheduling of taps, capacitor steps, and
//! inverter VAR setpoints as a mixed-integer QP.
//!
//! Per horizon step the problem carries branch flows, squared voltages,
//! inverter VARs, integer tap and capacitor positions, and nonnegative
//! movement splits that linearize the rate and daily-budget constraints. A
//! single per-bus-phase slack vector δ softens the voltage window across the
//! whole horizon; its weight dominates every other cost so the window only
//! gives way when the hardware runs out of authority.

use crate::feeder::{DeviceIndex, Feeder, FeederIndex};
use crate::linear_flow::transform_impedance;
use crate::miqp::{solve_miqp, MiqpConfig, MiqpProblem, MiqpSolution, MiqpStatus, QpProblemData};
use crate::profiles::{Profile, ProfileError};
use crate::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use std::collections::{BTreeMap, VecDeque};

#[derive(Clone, Debug)]
pub struct RhoConfig {
    /// Horizon length T in scheduling steps.
    pub horizon: usize,
    pub c_loss: f64,
    pub c_tap: f64,
    pub c_cap: f64,
    pub c_delta: f64,
    /// Global reserve-factor override; per-device values apply when None.
    pub reserve_factor: Option<f64>,
    /// Soft squared-voltage window, pu².
    pub v_lo: f64,
    pub v_hi: f64,
    /// Planning backoff from both window edges, pu². The schedule is built
    /// against the tightened window so that linearization error and
    /// intra-step fluctuation do not turn a feasible plan into real
    /// violations. Metrics always judge against [v_lo, v_hi] itself.
    pub plan_margin: f64,
    pub step_hours: f64,
    pub miqp: MiqpConfig,
}

impl Default for RhoConfig {
    fn default() -> Self {
        RhoConfig {
            horizon: 3,
            c_loss: 1.0,
            c_tap: 0.1,
            c_cap: 0.1,
            c_delta: 1e4,
            reserve_factor: None,
            v_lo: 0.9025,
            v_hi: 1.1025,
            plan_margin: 0.02,
            step_hours: 1.0,
            miqp: MiqpConfig::default(),
        }
    }
}

impl RhoConfig {
    /// Single-step configuration with movement costs off: the setup used for
    /// static solution-quality studies.
    pub fn static_study() -> RhoConfig {
        RhoConfig {
            horizon: 1,
            c_tap: 0.0,
            c_cap: 0.0,
            plan_margin: 0.0,
            ..RhoConfig::default()
        }
    }

    /// Window the schedule is actually built against.
    pub fn planning_window(&self) -> (f64, f64) {
        (self.v_lo + self.plan_margin, self.v_hi - self.plan_margin)
    }
}

/// Per-step, per-bus-phase-slot forecast vectors.
#[derive(Clone, Debug)]
pub struct ForecastSet {
    pub p_c: Vec<DVector<f64>>,
    pub q_c: Vec<DVector<f64>>,
    pub p_inv: Vec<DVector<f64>>,
}

impl ForecastSet {
    pub fn zeros(n_slots: usize, horizon: usize) -> ForecastSet {
        ForecastSet {
            p_c: vec![DVector::zeros(n_slots); horizon],
            q_c: vec![DVector::zeros(n_slots); horizon],
            p_inv: vec![DVector::zeros(n_slots); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.p_c.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("profile {0:?} referenced by the feeder is not loaded")]
    MissingProfile(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("forecast horizon {got} does not match config horizon {want}")]
    HorizonMismatch { got: usize, want: usize },
    #[error(transparent)]
    Miqp(#[from] crate::miqp::MiqpError),
    #[error("scheduling problem infeasible despite slack; feeder data is inconsistent")]
    Infeasible,
    #[error("prior state sized for a different device set")]
    PriorShape,
}

/// Applied device positions plus rolling movement history for daily budgets.
#[derive(Clone, Debug)]
pub struct PriorState {
    pub taps: Vec<i32>,
    pub cap_steps: Vec<u32>,
    /// Movement magnitudes of the most recent applied steps, newest last,
    /// bounded to the budget window minus the step being scheduled.
    tap_moves: Vec<VecDeque<u32>>,
    cap_moves: Vec<VecDeque<u32>>,
}

/// Applied scheduling steps counted against a daily limit, including the one
/// being scheduled.
const DAILY_WINDOW: usize = 24;

impl PriorState {
    pub fn new(devices: &DeviceIndex) -> PriorState {
        PriorState {
            taps: vec![0; devices.tap_controls.len()],
            cap_steps: vec![0; devices.cap_controls.len()],
            tap_moves: vec![VecDeque::new(); devices.tap_controls.len()],
            cap_moves: vec![VecDeque::new(); devices.cap_controls.len()],
        }
    }

    /// Movement budget still available to the upcoming horizon.
    pub fn tap_budget(&self, devices: &DeviceIndex, k: usize) -> u32 {
        let used: u32 = self.tap_moves[k].iter().sum();
        devices.tap_controls[k].spec.daily_limit.saturating_sub(used)
    }

    pub fn cap_budget(&self, devices: &DeviceIndex, k: usize) -> u32 {
        let used: u32 = self.cap_moves[k].iter().sum();
        devices.cap_controls[k].spec.daily_limit.saturating_sub(used)
    }

    /// Records the applied first-step settings and rolls the windows.
    pub fn apply(&mut self, taps: &[i32], cap_steps: &[u32]) {
        assert_eq!(taps.len(), self.taps.len());
        assert_eq!(cap_steps.len(), self.cap_steps.len());
        for (k, &n) in taps.iter().enumerate() {
            let moved = n.abs_diff(self.taps[k]);
            self.tap_moves[k].push_back(moved);
            while self.tap_moves[k].len() > DAILY_WINDOW - 1 {
                self.tap_moves[k].pop_front();
            }
            self.taps[k] = n;
        }
        for (k, &s) in cap_steps.iter().enumerate() {
            let moved = s.abs_diff(self.cap_steps[k]);
            self.cap_moves[k].push_back(moved);
            while self.cap_moves[k].len() > DAILY_WINDOW - 1 {
                self.cap_moves[k].pop_front();
            }
            self.cap_steps[k] = s;
        }
    }
}

fn profile_mean(
    profiles: &BTreeMap<String, Profile>,
    name: &Option<String>,
    t0: f64,
    t1: f64,
    periodic: bool,
) -> Result<f64, ScheduleError> {
    let Some(name) = name else {
        // No profile reference: the bus's peak values apply constantly.
        return Ok(1.0);
    };
    let profile = profiles
        .get(name)
        .ok_or_else(|| ScheduleError::MissingProfile(name.clone()))?;
    if periodic {
        Ok(profile.mean_periodic(t0, t1))
    } else {
        Ok(profile.mean(t0, t1)?)
    }
}

fn forecast_impl(
    feeder: &Feeder,
    idx: &FeederIndex,
    profiles: &BTreeMap<String, Profile>,
    now_s: f64,
    horizon: usize,
    step_s: f64,
    periodic: bool,
) -> Result<ForecastSet, ScheduleError> {
    let mut out = ForecastSet::zeros(idx.n_bus_phases(), horizon);
    for t in 0..horizon {
        let (t0, t1) = (now_s + t as f64 * step_s, now_s + (t + 1) as f64 * step_s);
        for bus in feeder.buses.iter().skip(1) {
            let load = profile_mean(profiles, &bus.load_profile, t0, t1, periodic)?;
            let der = profile_mean(profiles, &bus.der_profile, t0, t1, periodic)?;
            for (pos, p) in bus.phases.iter().enumerate() {
                let slot = idx.bus_phase_slot(feeder, bus.id, p).unwrap();
                out.p_c[t][slot] = bus.load_p[pos] * load;
                out.q_c[t][slot] = bus.load_q[pos] * load;
                out.p_inv[t][slot] = bus.der_p[pos] * der;
            }
        }
    }
    Ok(out)
}

/// Persistence forecast: exact profile means over each upcoming step.
/// Fails when the profiles do not cover `[now, now + horizon·step]`.
pub fn forecast_profiles(
    feeder: &Feeder,
    idx: &FeederIndex,
    profiles: &BTreeMap<String, Profile>,
    now_s: f64,
    horizon: usize,
    step_s: f64,
) -> Result<ForecastSet, ScheduleError> {
    forecast_impl(feeder, idx, profiles, now_s, horizon, step_s, false)
}

/// Same forecast with profiles treated as daily-periodic, for horizons that
/// run past the end of the bundled day.
pub fn forecast_profiles_periodic(
    feeder: &Feeder,
    idx: &FeederIndex,
    profiles: &BTreeMap<String, Profile>,
    now_s: f64,
    horizon: usize,
    step_s: f64,
) -> Result<ForecastSet, ScheduleError> {
    forecast_impl(feeder, idx, profiles, now_s, horizon, step_s, true)
}

/// Flat positions of every decision variable in the scheduling MIQP.
/// Layout per step: P, Q (branch-phase), v (bus-phase), q_inv (DER slots),
/// tap and cap positions (integer), then the nonnegative movement splits;
/// the shared δ block sits after all steps.
#[derive(Clone, Debug)]
pub struct VarMap {
    pub horizon: usize,
    pub nfp: usize,
    pub nbp: usize,
    pub nder: usize,
    pub ntap: usize,
    pub ncap: usize,
}

impl VarMap {
    fn stride(&self) -> usize {
        2 * self.nfp + self.nbp + self.nder + 3 * (self.ntap + self.ncap)
    }

    pub fn n_vars(&self) -> usize {
        self.horizon * self.stride() + self.nbp
    }

    pub fn p(&self, t: usize, slot: usize) -> usize {
        t * self.stride() + slot
    }

    pub fn q(&self, t: usize, slot: usize) -> usize {
        t * self.stride() + self.nfp + slot
    }

    pub fn v(&self, t: usize, slot: usize) -> usize {
        t * self.stride() + 2 * self.nfp + slot
    }

    pub fn q_inv(&self, t: usize, der: usize) -> usize {
        t * self.stride() + 2 * self.nfp + self.nbp + der
    }

    pub fn tap(&self, t: usize, k: usize) -> usize {
        t * self.stride() + 2 * self.nfp + self.nbp + self.nder + k
    }

    pub fn cap(&self, t: usize, k: usize) -> usize {
        self.tap(t, self.ntap) + k
    }

    pub fn tap_plus(&self, t: usize, k: usize) -> usize {
        self.cap(t, self.ncap) + 2 * k
    }

    pub fn tap_minus(&self, t: usize, k: usize) -> usize {
        self.tap_plus(t, k) + 1
    }

    pub fn cap_plus(&self, t: usize, k: usize) -> usize {
        self.tap_plus(t, self.ntap) + 2 * k
    }

    pub fn cap_minus(&self, t: usize, k: usize) -> usize {
        self.cap_plus(t, k) + 1
    }

    pub fn delta(&self, slot: usize) -> usize {
        self.horizon * self.stride() + slot
    }
}

pub struct RhoProblem {
    pub miqp: MiqpProblem,
    pub vars: VarMap,
    pub warnings: Vec<String>,
}

struct RowBuilder {
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl RowBuilder {
    fn new() -> RowBuilder {
        RowBuilder {
            rows: Vec::new(),
            rhs: Vec::new(),
        }
    }

    fn push(&mut self, entries: Vec<(usize, f64)>, rhs: f64) {
        self.rows.push(entries);
        self.rhs.push(rhs);
    }

    fn densify(&self, n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut a = DMatrix::zeros(self.rows.len(), n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, c) in row {
                a[(i, j)] += c;
            }
        }
        (a, DVector::from_column_slice(&self.rhs))
    }
}

pub fn build_rho_problem(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    config: &RhoConfig,
    forecasts: &ForecastSet,
    prior: &PriorState,
) -> Result<RhoProblem, ScheduleError> {
    if forecasts.horizon() != config.horizon {
        return Err(ScheduleError::HorizonMismatch {
            got: forecasts.horizon(),
            want: config.horizon,
        });
    }
    if prior.taps.len() != devices.tap_controls.len()
        || prior.cap_steps.len() != devices.cap_controls.len()
    {
        return Err(ScheduleError::PriorShape);
    }
    let vars = VarMap {
        horizon: config.horizon,
        nfp: idx.n_branch_phases(),
        nbp: idx.n_bus_phases(),
        nder: devices.der_slots.len(),
        ntap: devices.tap_controls.len(),
        ncap: devices.cap_controls.len(),
    };
    let n = vars.n_vars();
    let mut warnings = Vec::new();

    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut offset = 0.0;
    let mut eq = RowBuilder::new();
    let mut ineq = RowBuilder::new();
    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    let mut integers = Vec::new();

    // DER slot lookup per bus-phase slot.
    let mut der_at_slot = vec![None; vars.nbp];
    for (j, d) in devices.der_slots.iter().enumerate() {
        let slot = idx.bus_phase_slot(feeder, d.bus, d.phase).unwrap();
        der_at_slot[slot] = Some(j);
    }
    // Capacitor control lookup per bus-phase slot.
    let mut cap_at_slot = vec![None; vars.nbp];
    for (k, c) in devices.cap_controls.iter().enumerate() {
        let slot = idx.bus_phase_slot(feeder, c.bus, c.phase).unwrap();
        cap_at_slot[slot] = Some(k);
    }

    let slack_phases = feeder.buses[0].phases;
    let transformed: Vec<_> = feeder
        .branches
        .iter()
        .map(|br| transform_impedance(&br.z, br.phases))
        .collect();

    for t in 0..config.horizon {
        // Loss proxy: C_loss · Σ r^{φφ}(P² + Q²) / vnom.
        for (k, br) in feeder.branches.iter().enumerate() {
            for (i, p) in br.phases.iter().enumerate() {
                let slot = idx.branch_phase_slot(feeder, k, p).unwrap();
                let w = 2.0 * config.c_loss * br.z[(i, i)].re / feeder.vnom;
                let (ip, iq) = (vars.p(t, slot), vars.q(t, slot));
                h[(ip, ip)] += w;
                h[(iq, iq)] += w;
            }
        }

        // Flow balance per branch-phase: the flow entering a branch feeds its
        // child bus's net consumption plus everything further downstream.
        for (k, br) in feeder.branches.iter().enumerate() {
            for p in br.phases.iter() {
                let fslot = idx.branch_phase_slot(feeder, k, p).unwrap();
                let bslot = idx.bus_phase_slot(feeder, br.to_bus, p).unwrap();

                let mut prow = vec![(vars.p(t, fslot), 1.0)];
                let mut qrow = vec![(vars.q(t, fslot), 1.0)];
                for &m in idx.child_branches(br.to_bus) {
                    if let Some(ms) = idx.branch_phase_slot(feeder, m, p) {
                        prow.push((vars.p(t, ms), -1.0));
                        qrow.push((vars.q(t, ms), -1.0));
                    }
                }
                eq.push(prow, forecasts.p_c[t][bslot] - forecasts.p_inv[t][bslot]);

                if let Some(j) = der_at_slot[bslot] {
                    qrow.push((vars.q_inv(t, j), 1.0));
                }
                if let Some(c) = cap_at_slot[bslot] {
                    let step_q = devices.cap_controls[c].spec.step_q;
                    qrow.push((vars.cap(t, c), step_q));
                }
                eq.push(qrow, forecasts.q_c[t][bslot]);
            }
        }

        // Voltage drop along each branch, with the tap boost where present.
        for (k, br) in feeder.branches.iter().enumerate() {
            let tb = &transformed[k];
            for (i, p) in br.phases.iter().enumerate() {
                let child = idx.bus_phase_slot(feeder, br.to_bus, p).unwrap();
                let mut row = vec![(vars.v(t, child), 1.0)];
                let mut rhs = 0.0;
                if br.from_bus == 0 {
                    rhs += feeder.v0[slack_phases.position(p).unwrap()];
                } else {
                    let parent = idx.bus_phase_slot(feeder, br.from_bus, p).unwrap();
                    row.push((vars.v(t, parent), -1.0));
                }
                for (j, q) in br.phases.iter().enumerate() {
                    let js = idx.branch_phase_slot(feeder, k, q).unwrap();
                    row.push((vars.p(t, js), 2.0 * tb.r_bar[(i, j)]));
                    row.push((vars.q(t, js), 2.0 * tb.x_bar[(i, j)]));
                }
                if let Some(reg) = &br.regulator {
                    // Either one ganged control or one per phase covers slot p.
                    for (kc, ctrl) in devices.tap_controls.iter().enumerate() {
                        if ctrl.branch == k && ctrl.phases.contains(p) {
                            row.push((vars.tap(t, kc), -2.0 * feeder.vnom * reg.tap_step));
                        }
                    }
                }
                eq.push(row, rhs);
            }
        }

        // Soft voltage window via the shared slack.
        let (plan_lo, plan_hi) = config.planning_window();
        for slot in 0..vars.nbp {
            ineq.push(
                vec![(vars.v(t, slot), 1.0), (vars.delta(slot), 1.0)],
                plan_lo,
            );
            ineq.push(
                vec![(vars.v(t, slot), -1.0), (vars.delta(slot), 1.0)],
                -plan_hi,
            );
        }

        // Inverter VAR box: ±η·√(s² − p̂²) at the forecast operating point.
        for (j, d) in devices.der_slots.iter().enumerate() {
            let slot = idx.bus_phase_slot(feeder, d.bus, d.phase).unwrap();
            let p_hat = forecasts.p_inv[t][slot];
            let eta = config.reserve_factor.unwrap_or(d.reserve_factor);
            let head = d.s_inv * d.s_inv - p_hat * p_hat;
            let lim = if head < 0.0 {
                warnings.push(format!(
                    "step {t}: forecast active power {p_hat:.6} exceeds inverter \
                     rating {:.6} at bus {} phase {}; VAR limit clamped to 0",
                    d.s_inv, d.bus, d.phase
                ));
                0.0
            } else {
                eta * head.sqrt()
            };
            let iv = vars.q_inv(t, j);
            lower[iv] = -lim;
            upper[iv] = lim;
        }

        // Tap positions: integer, bounded, rate-limited through the splits.
        for (k, ctrl) in devices.tap_controls.iter().enumerate() {
            let it = vars.tap(t, k);
            integers.push(it);
            lower[it] = ctrl.spec.tap_min as f64;
            upper[it] = ctrl.spec.tap_max as f64;
            let (ip, im) = (vars.tap_plus(t, k), vars.tap_minus(t, k));
            lower[ip] = 0.0;
            lower[im] = 0.0;
            // n_t - n_{t-1} = n⁺ - n⁻.
            let mut row = vec![(it, 1.0), (ip, -1.0), (im, 1.0)];
            let rhs = if t == 0 {
                prior.taps[k] as f64
            } else {
                row.push((vars.tap(t - 1, k), -1.0));
                0.0
            };
            eq.push(row, rhs);
            ineq.push(
                vec![(ip, -1.0), (im, -1.0)],
                -(ctrl.spec.per_step_limit as f64),
            );

            // Movement cost: |phases| compensators move together when ganged.
            let mult = ctrl.phases.len() as f64 * config.c_tap;
            if mult > 0.0 {
                h[(it, it)] += 2.0 * mult;
                if t == 0 {
                    g[it] += -2.0 * mult * prior.taps[k] as f64;
                    offset += mult * (prior.taps[k] as f64).powi(2);
                } else {
                    let prev = vars.tap(t - 1, k);
                    h[(prev, prev)] += 2.0 * mult;
                    h[(it, prev)] += -2.0 * mult;
                    h[(prev, it)] += -2.0 * mult;
                }
            }
        }

        // Capacitor steps, same treatment.
        for (k, ctrl) in devices.cap_controls.iter().enumerate() {
            let ic = vars.cap(t, k);
            integers.push(ic);
            lower[ic] = 0.0;
            upper[ic] = ctrl.spec.max_steps as f64;
            let (ip, im) = (vars.cap_plus(t, k), vars.cap_minus(t, k));
            lower[ip] = 0.0;
            lower[im] = 0.0;
            let mut row = vec![(ic, 1.0), (ip, -1.0), (im, 1.0)];
            let rhs = if t == 0 {
                prior.cap_steps[k] as f64
            } else {
                row.push((vars.cap(t - 1, k), -1.0));
                0.0
            };
            eq.push(row, rhs);
            ineq.push(
                vec![(ip, -1.0), (im, -1.0)],
                -(ctrl.spec.per_step_limit as f64),
            );

            if config.c_cap > 0.0 {
                let c = config.c_cap;
                h[(ic, ic)] += 2.0 * c;
                if t == 0 {
                    g[ic] += -2.0 * c * prior.cap_steps[k] as f64;
                    offset += c * (prior.cap_steps[k] as f64).powi(2);
                } else {
                    let prev = vars.cap(t - 1, k);
                    h[(prev, prev)] += 2.0 * c;
                    h[(ic, prev)] += -2.0 * c;
                    h[(prev, ic)] += -2.0 * c;
                }
            }
        }
    }

    // Daily budgets: total splits over the horizon fit the remaining window.
    for k in 0..vars.ntap {
        let budget = prior.tap_budget(devices, k) as f64;
        let row = (0..config.horizon)
            .flat_map(|t| [(vars.tap_plus(t, k), -1.0), (vars.tap_minus(t, k), -1.0)])
            .collect();
        ineq.push(row, -budget);
    }
    for k in 0..vars.ncap {
        let budget = prior.cap_budget(devices, k) as f64;
        let row = (0..config.horizon)
            .flat_map(|t| [(vars.cap_plus(t, k), -1.0), (vars.cap_minus(t, k), -1.0)])
            .collect();
        ineq.push(row, -budget);
    }

    // Slack cost and nonnegativity.
    for slot in 0..vars.nbp {
        let id = vars.delta(slot);
        lower[id] = 0.0;
        h[(id, id)] += 2.0 * config.c_delta;
    }

    let (a_eq, b_eq) = eq.densify(n);
    let (a_in, b_in) = ineq.densify(n);
    let qp = QpProblem {
        h,
        g,
        a_eq,
        b_eq,
        a_in,
        b_in,
    };
    Ok(RhoProblem {
        miqp: MiqpProblem {
            qp: QpProblemData::from_problem(&qp),
            integers,
            lower,
            upper,
            objective_offset: offset,
        },
        vars,
        warnings,
    })
}

/// First-step outcome of one scheduling round.
#[derive(Clone, Debug)]
pub struct DeviceSchedule {
    pub taps: Vec<i32>,
    pub cap_steps: Vec<u32>,
    /// Scheduled first-step inverter VARs per DER slot (diagnostic; the lower
    /// layer tracks voltage references, not these).
    pub q_inv: Vec<f64>,
    /// First-step squared-voltage solution per bus-phase slot.
    pub nu: DVector<f64>,
    pub delta: DVector<f64>,
    pub objective: f64,
    pub status: MiqpStatus,
    pub nodes_explored: usize,
    /// Full-horizon trajectories for diagnostics.
    pub horizon_taps: Vec<Vec<i32>>,
    pub horizon_caps: Vec<Vec<u32>>,
    pub warnings: Vec<String>,
}

pub fn extract_schedule(
    sol: &MiqpSolution,
    vars: &VarMap,
    warnings: Vec<String>,
) -> DeviceSchedule {
    let horizon_taps: Vec<Vec<i32>> = (0..vars.horizon)
        .map(|t| {
            (0..vars.ntap)
                .map(|k| sol.values[vars.tap(t, k)].round() as i32)
                .collect()
        })
        .collect();
    let horizon_caps: Vec<Vec<u32>> = (0..vars.horizon)
        .map(|t| {
            (0..vars.ncap)
                .map(|k| sol.values[vars.cap(t, k)].round() as u32)
                .collect()
        })
        .collect();
    DeviceSchedule {
        taps: horizon_taps[0].clone(),
        cap_steps: horizon_caps[0].clone(),
        q_inv: (0..vars.nder)
            .map(|j| sol.values[vars.q_inv(0, j)])
            .collect(),
        nu: DVector::from_fn(vars.nbp, |s, _| sol.values[vars.v(0, s)]),
        delta: DVector::from_fn(vars.nbp, |s, _| sol.values[vars.delta(s)]),
        objective: sol.objective,
        status: sol.status,
        nodes_explored: sol.nodes_explored,
        horizon_taps,
        horizon_caps,
        warnings,
    }
}

/// Builds, solves, extracts the first step, and rolls the prior state.
pub fn schedule(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    config: &RhoConfig,
    forecasts: &ForecastSet,
    prior: &mut PriorState,
) -> Result<DeviceSchedule, ScheduleError> {
    let built = build_rho_problem(feeder, idx, devices, config, forecasts, prior)?;
    let sol = solve_miqp(&built.miqp, &config.miqp)?;
    if sol.status == MiqpStatus::Infeasible {
        return Err(ScheduleError::Infeasible);
    }
    let out = extract_schedule(&sol, &built.vars, built.warnings);
    prior.apply(&out.taps, &out.cap_steps);
    Ok(out)
}

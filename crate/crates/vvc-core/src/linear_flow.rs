//! Linearized branch flow for unbalanced radial feeders.
//!
//! Flows aggregate load minus generation down each branch; squared voltage
//! magnitudes drop by `2(r̄·P + x̄·Q)` per branch and rise by
//! `2·vnom·n·Δtap` across a regulator. The phase coupling enters through the
//! transformed impedances `r̄ = Re{αα^H}∘r + Im{αα^H}∘x` and
//! `x̄ = Re{αα^H}∘x − Im{αα^H}∘r`, built from the assumption of
//! near-balanced phasor angles. Eliminating flows gives the affine
//! sensitivity `v = M·q_inv + μ` with `M = 2·A^{-T}·X̄·A^{-1}`.

use crate::feeder::{build_incidence, DeviceIndex, Feeder, FeederError, FeederIndex};
use crate::phase::PhaseSet;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

#[derive(Debug, thiserror::Error)]
pub enum LinearFlowError {
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error("tap control {control} position {n} outside [{min}, {max}]")]
    TapOutOfRange {
        control: usize,
        n: i32,
        min: i32,
        max: i32,
    },
    #[error("expected {expected} tap positions, got {got}")]
    TapCount { expected: usize, got: usize },
    #[error("injection vectors must have {expected} bus-phase entries")]
    InjectionLength { expected: usize },
    #[error("sensitivity matrix is not symmetric positive definite")]
    NotPositiveDefinite,
}

/// Phase-coupling-transformed branch impedance.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedImpedance {
    pub r_bar: DMatrix<f64>,
    pub x_bar: DMatrix<f64>,
}

/// Applies the balanced-phasor transform to one branch impedance matrix.
/// `z` must be |phases| × |phases|, aligned with the set's a < b < c order.
pub fn transform_impedance(z: &DMatrix<Complex64>, phases: PhaseSet) -> TransformedImpedance {
    let n = phases.len();
    assert_eq!(z.nrows(), n);
    assert_eq!(z.ncols(), n);
    let alpha: Vec<Complex64> = phases.iter().map(|p| p.unit_phasor()).collect();
    let mut r_bar = DMatrix::zeros(n, n);
    let mut x_bar = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let b = alpha[i] * alpha[j].conj();
            let (r, x) = (z[(i, j)].re, z[(i, j)].im);
            r_bar[(i, j)] = b.re * r + b.im * x;
            x_bar[(i, j)] = b.re * x - b.im * r;
        }
    }
    TransformedImpedance { r_bar, x_bar }
}

/// Per-bus-phase-slot injection vectors, consumption and generation split by
/// origin. All lengths equal the non-slack bus-phase count.
#[derive(Clone, Debug, PartialEq)]
pub struct Injections {
    pub p_c: DVector<f64>,
    pub q_c: DVector<f64>,
    pub p_inv: DVector<f64>,
    pub q_inv: DVector<f64>,
    pub q_cap: DVector<f64>,
}

impl Injections {
    pub fn zeros(n: usize) -> Injections {
        Injections {
            p_c: DVector::zeros(n),
            q_c: DVector::zeros(n),
            p_inv: DVector::zeros(n),
            q_inv: DVector::zeros(n),
            q_cap: DVector::zeros(n),
        }
    }

    fn check_len(&self, n: usize) -> Result<(), LinearFlowError> {
        let ok = [&self.p_c, &self.q_c, &self.p_inv, &self.q_inv, &self.q_cap]
            .iter()
            .all(|v| v.len() == n);
        if ok {
            Ok(())
        } else {
            Err(LinearFlowError::InjectionLength { expected: n })
        }
    }

    /// Net active consumption per slot (loads minus DER output).
    pub fn net_p(&self) -> DVector<f64> {
        &self.p_c - &self.p_inv
    }

    /// Net reactive consumption per slot.
    pub fn net_q(&self) -> DVector<f64> {
        &self.q_c - &self.q_inv - &self.q_cap
    }
}

#[derive(Clone, Debug)]
pub struct LinearFlowResult {
    /// Squared voltage magnitude per bus-phase slot, pu².
    pub v: DVector<f64>,
    /// Active flow entering each branch-phase slot from its parent bus.
    pub p_flow: DVector<f64>,
    pub q_flow: DVector<f64>,
}

pub(crate) fn check_taps(
    devices: &DeviceIndex,
    taps: &[i32],
) -> Result<(), LinearFlowError> {
    if taps.len() != devices.tap_controls.len() {
        return Err(LinearFlowError::TapCount {
            expected: devices.tap_controls.len(),
            got: taps.len(),
        });
    }
    for (i, (ctrl, &n)) in devices.tap_controls.iter().zip(taps).enumerate() {
        if n < ctrl.spec.tap_min || n > ctrl.spec.tap_max {
            return Err(LinearFlowError::TapOutOfRange {
                control: i,
                n,
                min: ctrl.spec.tap_min,
                max: ctrl.spec.tap_max,
            });
        }
    }
    Ok(())
}

/// Backward flow aggregation and forward voltage sweep of the linear model.
pub fn solve(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    inj: &Injections,
    taps: &[i32],
) -> Result<LinearFlowResult, LinearFlowError> {
    inj.check_len(idx.n_bus_phases())?;
    check_taps(devices, taps)?;
    let net_p = inj.net_p();
    let net_q = inj.net_q();
    let nfp = idx.n_branch_phases();
    let mut p_flow = DVector::zeros(nfp);
    let mut q_flow = DVector::zeros(nfp);

    // Children precede parents when branches are walked in reverse child order.
    for k in (0..feeder.branches.len()).rev() {
        let br = &feeder.branches[k];
        for p in br.phases.iter() {
            let slot = idx.branch_phase_slot(feeder, k, p).unwrap();
            let bus_slot = idx.bus_phase_slot(feeder, br.to_bus, p).unwrap();
            let mut pf = net_p[bus_slot];
            let mut qf = net_q[bus_slot];
            for &m in idx.child_branches(br.to_bus) {
                if let Some(ms) = idx.branch_phase_slot(feeder, m, p) {
                    pf += p_flow[ms];
                    qf += q_flow[ms];
                }
            }
            p_flow[slot] = pf;
            q_flow[slot] = qf;
        }
    }

    let tap_bp = devices.taps_to_branch_phase(feeder, idx, taps);
    let slack_phases = feeder.buses[0].phases;
    let mut v = DVector::zeros(idx.n_bus_phases());
    for (k, br) in feeder.branches.iter().enumerate() {
        let t = transform_impedance(&br.z, br.phases);
        let tap_step = br.regulator.as_ref().map_or(0.0, |r| r.tap_step);
        for (i, p) in br.phases.iter().enumerate() {
            let slot = idx.branch_phase_slot(feeder, k, p).unwrap();
            let upstream = if br.from_bus == 0 {
                feeder.v0[slack_phases.position(p).unwrap()]
            } else {
                v[idx.bus_phase_slot(feeder, br.from_bus, p).unwrap()]
            };
            let mut drop = 0.0;
            for (j, q) in br.phases.iter().enumerate() {
                let js = idx.branch_phase_slot(feeder, k, q).unwrap();
                drop += 2.0 * (t.r_bar[(i, j)] * p_flow[js] + t.x_bar[(i, j)] * q_flow[js]);
            }
            let boost = 2.0 * feeder.vnom * tap_bp[slot] as f64 * tap_step;
            v[idx.bus_phase_slot(feeder, br.to_bus, p).unwrap()] = upstream - drop + boost;
        }
    }
    Ok(LinearFlowResult { v, p_flow, q_flow })
}

/// Affine voltage model `v = M·q_inv + μ`; `q_inv` spans all bus-phase slots.
#[derive(Clone, Debug)]
pub struct SensitivityModel {
    pub m: DMatrix<f64>,
    a: DMatrix<f64>,
    a0t_v0: DVector<f64>,
    r_big: DMatrix<f64>,
    x_big: DMatrix<f64>,
    /// Branch-phase slot and tap step per tap control.
    tap_slots: Vec<Vec<(usize, f64)>>,
    vnom: f64,
}

impl SensitivityModel {
    pub fn build(
        feeder: &Feeder,
        idx: &FeederIndex,
        devices: &DeviceIndex,
    ) -> Result<SensitivityModel, LinearFlowError> {
        let inc = build_incidence(feeder, idx)?;
        let n = idx.n_branch_phases();
        let mut r_big = DMatrix::zeros(n, n);
        let mut x_big = DMatrix::zeros(n, n);
        for (k, br) in feeder.branches.iter().enumerate() {
            let t = transform_impedance(&br.z, br.phases);
            let range = idx.branch_slots(k);
            let d = range.len();
            r_big
                .view_mut((range.start, range.start), (d, d))
                .copy_from(&t.r_bar);
            x_big
                .view_mut((range.start, range.start), (d, d))
                .copy_from(&t.x_bar);
        }
        let v0 = DVector::from_column_slice(&feeder.v0);
        let a0t_v0 = inc.a0.transpose() * v0;
        let a_inv = solve_tri(&inc.a, &DMatrix::identity(n, n));
        let m = 2.0 * a_inv.transpose() * &x_big * &a_inv;
        let tap_slots = devices
            .tap_controls
            .iter()
            .map(|ctrl| {
                ctrl.phases
                    .iter()
                    .map(|p| {
                        let slot = idx.branch_phase_slot(feeder, ctrl.branch, p).unwrap();
                        (slot, ctrl.spec.tap_step)
                    })
                    .collect()
            })
            .collect();
        Ok(SensitivityModel {
            m,
            a: inc.a,
            a0t_v0,
            r_big,
            x_big,
            tap_slots,
            vnom: feeder.vnom,
        })
    }

    /// Offset vector μ for given non-inverter injections and tap positions
    /// (`inj.q_inv` is ignored by construction).
    pub fn mu(&self, inj: &Injections, taps: &[i32]) -> DVector<f64> {
        assert_eq!(taps.len(), self.tap_slots.len());
        let n = self.a.nrows();
        let p_net = &inj.p_inv - &inj.p_c;
        let q_net = &inj.q_cap - &inj.q_c;
        let p_branch = solve_tri_vec(&self.a, &p_net);
        let q_branch = solve_tri_vec(&self.a, &q_net);
        let mut rhs = -&self.a0t_v0 + 2.0 * &self.r_big * p_branch + 2.0 * &self.x_big * q_branch;
        for (slots, &tap) in self.tap_slots.iter().zip(taps) {
            for &(slot, step) in slots {
                rhs[slot] -= 2.0 * self.vnom * tap as f64 * step;
            }
        }
        let mut mu = DVector::zeros(n);
        tr_solve_tri(&self.a, &rhs, &mut mu);
        mu
    }

    /// Linear-model voltages for a full bus-phase `q_inv` vector.
    pub fn voltage(&self, q_inv: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        &self.m * q_inv + mu
    }
}

fn solve_tri(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.solve_upper_triangular(b)
        .expect("incidence block is structurally invertible")
}

fn solve_tri_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    a.solve_upper_triangular(b)
        .expect("incidence block is structurally invertible")
}

fn tr_solve_tri(a: &DMatrix<f64>, b: &DVector<f64>, out: &mut DVector<f64>) {
    out.copy_from(
        &a.tr_solve_upper_triangular(b)
            .expect("incidence block is structurally invertible"),
    );
}

/// Raw diagonal resistance per branch-phase slot (loss objective weights).
pub fn branch_r_diag(feeder: &Feeder, idx: &FeederIndex) -> DVector<f64> {
    let mut out = DVector::zeros(idx.n_branch_phases());
    for (k, br) in feeder.branches.iter().enumerate() {
        for (i, _p) in br.phases.iter().enumerate() {
            out[idx.branch_slots(k).start + i] = br.z[(i, i)].re;
        }
    }
    out
}

/// Signed error, in tap steps, committed by linearizing `t²·v` at tap `n`:
/// `(t²·v − v − 2·n·Δtap·vnom) / (2·Δtap·vnom)` with `t = 1 + n·Δtap`.
pub fn tap_linearization_error(n: i32, v: f64, tap_step: f64, vnom: f64) -> f64 {
    let t = 1.0 + n as f64 * tap_step;
    (t * t * v - (v + 2.0 * n as f64 * tap_step * vnom)) / (2.0 * tap_step * vnom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{Branch, Bus, RegulatorSpec};
    use crate::phase::Phase;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_bus(regulator: bool) -> (Feeder, FeederIndex, DeviceIndex) {
        let a = PhaseSet::single(Phase::A);
        let buses = vec![Bus::new(0, a), Bus::new(1, a)];
        let branches = vec![Branch {
            from_bus: 0,
            to_bus: 1,
            phases: a,
            z: DMatrix::from_element(1, 1, Complex64::new(0.01, 0.02)),
            regulator: regulator.then(|| RegulatorSpec {
                tap_min: -16,
                tap_max: 16,
                tap_step: 0.00625,
                per_step_limit: 4,
                daily_limit: 30,
                ganged: true,
            }),
        }];
        let f = Feeder::new("two_bus", buses, branches, vec![1.0], 1.0, 1.0);
        let idx = FeederIndex::new(&f).unwrap();
        let devices = DeviceIndex::new(&f);
        (f, idx, devices)
    }

    fn two_bus_injections() -> Injections {
        let mut inj = Injections::zeros(1);
        inj.p_c[0] = 0.5;
        inj.q_c[0] = 0.2;
        inj.p_inv[0] = 0.3;
        inj
    }

    #[test]
    fn transform_two_phase_mutual() {
        // Phases {a,b}: alpha_a * conj(alpha_b) = -1/2 + j*sqrt(3)/2, so the
        // mutual entry mixes r and x: -0.5*0.004 + 0.866*0.008.
        let mut z = DMatrix::zeros(2, 2);
        z[(0, 0)] = Complex64::new(0.01, 0.02);
        z[(1, 1)] = Complex64::new(0.01, 0.02);
        z[(0, 1)] = Complex64::new(0.004, 0.008);
        z[(1, 0)] = Complex64::new(0.004, 0.008);
        let t = transform_impedance(&z, PhaseSet::parse("ab").unwrap());
        assert_relative_eq!(t.r_bar[(0, 1)], 0.004_928_203_230_275_5, max_relative = 1e-12);
        assert_relative_eq!(t.r_bar[(0, 0)], 0.01, max_relative = 1e-15);
        assert_relative_eq!(t.x_bar[(0, 0)], 0.02, max_relative = 1e-15);
        // x̄ mutual: -0.5*x - (sqrt(3)/2)*r on the (a,b) side.
        assert_relative_eq!(
            t.x_bar[(0, 1)],
            -0.5 * 0.008 - 0.75f64.sqrt() * 0.004,
            max_relative = 1e-12
        );
    }

    #[test]
    fn transform_without_mutuals_is_identity_on_r_x() {
        let z = DMatrix::from_diagonal_element(3, 3, Complex64::new(0.013, 0.027));
        let t = transform_impedance(&z, PhaseSet::ABC);
        for i in 0..3 {
            for j in 0..3 {
                let (er, ex) = if i == j { (0.013, 0.027) } else { (0.0, 0.0) };
                assert_relative_eq!(t.r_bar[(i, j)], er, epsilon = 1e-15);
                assert_relative_eq!(t.x_bar[(i, j)], ex, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn two_bus_voltage_drop() {
        let (f, idx, devices) = two_bus(false);
        let res = solve(&f, &idx, &devices, &two_bus_injections(), &[]).unwrap();
        // P = 0.2, Q = 0.2: v1 = 1 - 2*(0.01*0.2 + 0.02*0.2) = 0.988.
        assert_relative_eq!(res.v[0], 0.988, max_relative = 1e-14);
        assert_relative_eq!(res.p_flow[0], 0.2, max_relative = 1e-14);
        assert_relative_eq!(res.q_flow[0], 0.2, max_relative = 1e-14);
    }

    #[test]
    fn positive_tap_raises_downstream_voltage() {
        let (f, idx, devices) = two_bus(true);
        let res = solve(&f, &idx, &devices, &two_bus_injections(), &[4]).unwrap();
        assert_relative_eq!(res.v[0], 0.988 + 2.0 * 4.0 * 0.00625, max_relative = 1e-14);
    }

    #[test]
    fn tap_out_of_range_is_rejected() {
        let (f, idx, devices) = two_bus(true);
        let err = solve(&f, &idx, &devices, &two_bus_injections(), &[17]).unwrap_err();
        assert!(matches!(err, LinearFlowError::TapOutOfRange { n: 17, .. }));
    }

    #[test]
    fn sensitivity_matches_hand_values() {
        let (f, idx, devices) = two_bus(true);
        let s = SensitivityModel::build(&f, &idx, &devices).unwrap();
        assert_relative_eq!(s.m[(0, 0)], 0.04, max_relative = 1e-14);
        let mu0 = s.mu(&two_bus_injections(), &[0]);
        assert_relative_eq!(mu0[0], 0.988, max_relative = 1e-14);
        let mu4 = s.mu(&two_bus_injections(), &[4]);
        assert_relative_eq!(mu4[0], 1.038, max_relative = 1e-14);
    }

    fn chain4_with_devices() -> (Feeder, FeederIndex, DeviceIndex) {
        let buses: Vec<Bus> = (0..4).map(|i| Bus::new(i, PhaseSet::ABC)).collect();
        let mk_z = |r: f64, x: f64, xm: f64| {
            let mut z = DMatrix::zeros(3, 3);
            for i in 0..3 {
                for j in 0..3 {
                    z[(i, j)] = if i == j {
                        Complex64::new(r, x)
                    } else {
                        Complex64::new(0.0, xm)
                    };
                }
            }
            z
        };
        let reg = RegulatorSpec {
            tap_min: -16,
            tap_max: 16,
            tap_step: 0.00625,
            per_step_limit: 2,
            daily_limit: 20,
            ganged: false,
        };
        let branches = vec![
            Branch {
                from_bus: 0,
                to_bus: 1,
                phases: PhaseSet::ABC,
                z: mk_z(0.006, 0.012, 0.002),
                regulator: None,
            },
            Branch {
                from_bus: 1,
                to_bus: 2,
                phases: PhaseSet::ABC,
                z: mk_z(0.02, 0.03, 0.004),
                regulator: None,
            },
            Branch {
                from_bus: 2,
                to_bus: 3,
                phases: PhaseSet::ABC,
                z: mk_z(0.04, 0.08, 0.008),
                regulator: Some(reg),
            },
        ];
        let f = Feeder::new("chain4", buses, branches, vec![1.0; 3], 1.0, 1.0);
        let idx = FeederIndex::new(&f).unwrap();
        let devices = DeviceIndex::new(&f);
        (f, idx, devices)
    }

    #[test]
    fn sensitivity_cross_checks_against_sweep() {
        let (f, idx, devices) = chain4_with_devices();
        let s = SensitivityModel::build(&f, &idx, &devices).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = idx.n_bus_phases();
            let rand_vec =
                |rng: &mut ChaCha8Rng| DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3f64));
            let inj = Injections {
                p_c: rand_vec(&mut rng).map(f64::abs),
                q_c: rand_vec(&mut rng).map(f64::abs),
                p_inv: rand_vec(&mut rng).map(f64::abs),
                q_inv: rand_vec(&mut rng),
                q_cap: rand_vec(&mut rng).map(f64::abs),
            };
            let taps: Vec<i32> = (0..3).map(|_| rng.gen_range(-16..=16)).collect();
            let direct = solve(&f, &idx, &devices, &inj, &taps).unwrap();
            let mu = s.mu(&inj, &taps);
            let via_model = s.voltage(&inj.q_inv, &mu);
            let err = (&direct.v - &via_model).amax();
            assert!(err <= 1e-10, "model mismatch {err}");
        }
    }

    #[test]
    fn superposition_holds_at_fixed_taps() {
        let (f, idx, devices) = chain4_with_devices();
        let n = idx.n_bus_phases();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let taps = [3, -2, 5];
        let zero = solve(&f, &idx, &devices, &Injections::zeros(n), &taps).unwrap();
        for _ in 0..20 {
            let rand_inj = |rng: &mut ChaCha8Rng| Injections {
                p_c: DVector::from_fn(n, |_, _| rng.gen_range(0.0..0.3)),
                q_c: DVector::from_fn(n, |_, _| rng.gen_range(0.0..0.15)),
                p_inv: DVector::from_fn(n, |_, _| rng.gen_range(0.0..0.2)),
                q_inv: DVector::from_fn(n, |_, _| rng.gen_range(-0.1..0.1)),
                q_cap: DVector::from_fn(n, |_, _| rng.gen_range(0.0..0.1)),
            };
            let i1 = rand_inj(&mut rng);
            let i2 = rand_inj(&mut rng);
            let sum = Injections {
                p_c: &i1.p_c + &i2.p_c,
                q_c: &i1.q_c + &i2.q_c,
                p_inv: &i1.p_inv + &i2.p_inv,
                q_inv: &i1.q_inv + &i2.q_inv,
                q_cap: &i1.q_cap + &i2.q_cap,
            };
            let v1 = solve(&f, &idx, &devices, &i1, &taps).unwrap().v;
            let v2 = solve(&f, &idx, &devices, &i2, &taps).unwrap().v;
            let vs = solve(&f, &idx, &devices, &sum, &taps).unwrap().v;
            let lhs = &vs - &zero.v;
            let rhs = (&v1 - &zero.v) + (&v2 - &zero.v);
            assert!((lhs - rhs).amax() <= 1e-12);
        }
    }

    #[test]
    fn sensitivity_is_symmetric_positive_definite_without_mutual_r() {
        let (f, idx, devices) = chain4_with_devices();
        let s = SensitivityModel::build(&f, &idx, &devices).unwrap();
        let asym = (&s.m - s.m.transpose()).amax();
        assert!(asym <= 1e-14, "asymmetry {asym}");
        let eig = s.m.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        assert!(min > 0.0, "min eigenvalue {min}");
    }

    #[test]
    fn tap_error_at_extreme_tap() {
        let e = tap_linearization_error(16, 1.05, 0.00625, 1.0);
        assert_relative_eq!(e, 1.64, max_relative = 1e-12);
        assert_relative_eq!(tap_linearization_error(0, 1.05, 0.00625, 1.0), 0.0);
    }
}

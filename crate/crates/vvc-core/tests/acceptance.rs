//! Acceptance experiments on the bundled feeder: nine numbered checks, each
//! reported as one pass/fail line with its runtime against a wall-clock
//! budget. Run `cargo test --test acceptance -- --nocapture` to watch the
//! lines as they complete; failures also collect into the final panic.
//!
//! Check 9 reruns checks 3 through 8 and byte-compares their result files,
//! so everything those checks compute must be deterministic, including
//! iteration counts and branch-and-bound node totals.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use vvc_core::control::{
    contraction_factor, der_sensitivity, integral_step, project_reference, reactive_limits,
    stability_bound,
};
use vvc_core::feeder::DeviceIndex;
use vvc_core::linear_flow::{self, tap_linearization_error, Injections, SensitivityModel};
use vvc_core::miqp::{
    round_relaxation, solve_miqp, MiqpConfig, MiqpProblem, MiqpStatus, QpProblemData,
};
use vvc_core::power_flow::{solve_plant, PlantConfig};
use vvc_core::profiles::Profile;
use vvc_core::qp::{solve_qp, QpError, QpProblem};
use vvc_core::scheduler::{
    build_rho_problem, extract_schedule, forecast_profiles, DeviceSchedule, ForecastSet,
    PriorState, RhoConfig, VarMap,
};
use vvc_core::sim::{
    run_scenario, static_tracking_experiment, ControlMode, ScenarioConfig, TrackingConfig,
};
use vvc_core::{Feeder, FeederIndex};

/// (one-line detail, result-file content) on pass; reason on fail.
type Crit = Result<(String, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

struct Fixture {
    f: Feeder,
    idx: FeederIndex,
    devices: DeviceIndex,
    profiles: BTreeMap<String, Profile>,
}

fn fixture() -> Fixture {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let f = vvc_core::io::load_feeder(&root.join("feeders/d1.json")).unwrap();
    let idx = FeederIndex::new(&f).unwrap();
    let devices = DeviceIndex::new(&f);
    let mut profiles = BTreeMap::new();
    for name in ["load", "solar", "wind"] {
        profiles.insert(
            name.to_string(),
            Profile::load(&root.join(format!("profiles/{name}.csv"))).unwrap(),
        );
    }
    Fixture {
        f,
        idx,
        devices,
        profiles,
    }
}

fn scaled_injections(fx: &Fixture, scale: f64) -> Injections {
    let mut inj = Injections::zeros(fx.idx.n_bus_phases());
    for bus in &fx.f.buses {
        for (pos, p) in bus.phases.iter().enumerate() {
            if let Some(slot) = fx.idx.bus_phase_slot(&fx.f, bus.id, p) {
                inj.p_c[slot] = scale * bus.load_p[pos];
                inj.q_c[slot] = scale * bus.load_q[pos];
            }
        }
    }
    inj
}

/// Evening operating point: near-peak load, wind at half output, no sun.
fn heavy_snapshot(fx: &Fixture) -> Injections {
    let mut inj = scaled_injections(fx, 0.97);
    for bus in &fx.f.buses {
        if bus.der_profile.as_deref() != Some("wind") {
            continue;
        }
        for (pos, p) in bus.phases.iter().enumerate() {
            let slot = fx.idx.bus_phase_slot(&fx.f, bus.id, p).unwrap();
            inj.p_inv[slot] = 0.5 * bus.der_p[pos];
        }
    }
    inj
}

/// Single-step scheduling setup used by the solution-quality and tracking
/// checks: movement costs small but nonzero so device choices are priced,
/// no planning backoff.
fn study_config() -> RhoConfig {
    RhoConfig {
        c_tap: 0.01,
        c_cap: 0.01,
        ..RhoConfig::static_study()
    }
}

fn snapshot_forecast(fx: &Fixture, inj: &Injections) -> ForecastSet {
    let mut fc = ForecastSet::zeros(fx.idx.n_bus_phases(), 1);
    fc.p_c[0] = inj.p_c.clone();
    fc.q_c[0] = inj.q_c.clone();
    fc.p_inv[0] = inj.p_inv.clone();
    fc
}

fn der_slot_indices(fx: &Fixture) -> Vec<usize> {
    fx.devices
        .der_slots
        .iter()
        .map(|d| fx.idx.bus_phase_slot(&fx.f, d.bus, d.phase).unwrap())
        .collect()
}

fn gather(slots: &[usize], v: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(slots.len(), slots.iter().map(|&s| v[s]))
}

fn solve_study(
    fx: &Fixture,
    inj: &Injections,
) -> Result<(MiqpProblem, VarMap, DeviceSchedule), String> {
    let cfg = study_config();
    let fc = snapshot_forecast(fx, inj);
    let prior = PriorState::new(&fx.devices);
    let built =
        build_rho_problem(&fx.f, &fx.idx, &fx.devices, &cfg, &fc, &prior).map_err(err)?;
    let sol = solve_miqp(&built.miqp, &cfg.miqp).map_err(err)?;
    if sol.status != MiqpStatus::Optimal {
        return Err(format!("study schedule ended {:?}", sol.status));
    }
    let sched = extract_schedule(&sol, &built.vars, vec![]);
    Ok((built.miqp, built.vars, sched))
}

fn schedule_losses(
    fx: &Fixture,
    base: &Injections,
    sched: &DeviceSchedule,
) -> Result<f64, String> {
    let mut inj = base.clone();
    inj.q_inv = DVector::from_vec(fx.devices.der_to_bus_phase(&fx.f, &fx.idx, &sched.q_inv));
    inj.q_cap = DVector::from_vec(fx.devices.caps_to_q(&fx.f, &fx.idx, &sched.cap_steps));
    let st = solve_plant(
        &fx.f,
        &fx.idx,
        &fx.devices,
        &inj,
        &sched.taps,
        &PlantConfig::default(),
    )
    .map_err(err)?;
    Ok(st.losses)
}

// --- check 1: tap linearization stays within two tap-equivalents ---

fn criterion1() -> Crit {
    let mut worst = 0.0f64;
    for n in -16..=16i32 {
        for i in 0..=24 {
            let v = 0.9409 + 0.005 * i as f64;
            worst = worst.max(tap_linearization_error(n, v, 0.00625, 1.0).abs());
        }
    }
    if worst > 2.0 {
        return Err(format!("worst grid error {worst:.6} tap-equivalents exceeds 2.0"));
    }
    Ok((
        format!("worst error {worst:.6} tap-equivalents over 825 grid points"),
        String::new(),
    ))
}

// --- check 2: linear and nonlinear flows agree at light loading ---

fn criterion2(fx: &Fixture) -> Crit {
    let taps0 = vec![0i32; fx.devices.tap_controls.len()];
    let mut parts = Vec::new();
    for (scale, tol) in [(0.5, 1e-2), (0.1, 5e-4)] {
        let inj = scaled_injections(fx, scale);
        let lin = linear_flow::solve(&fx.f, &fx.idx, &fx.devices, &inj, &taps0).map_err(err)?;
        let nl = solve_plant(
            &fx.f,
            &fx.idx,
            &fx.devices,
            &inj,
            &taps0,
            &PlantConfig::default(),
        )
        .map_err(err)?;
        let gap = (&lin.v - &nl.v).amax();
        if gap > tol {
            return Err(format!(
                "voltage gap {gap:.3e} at {:.0}% loading exceeds {tol:.0e}",
                100.0 * scale
            ));
        }
        parts.push(format!("{:.0}% gap {gap:.3e} <= {tol:.0e}", 100.0 * scale));
    }
    Ok((parts.join(", "), String::new()))
}

// --- check 3: branch and bound matches exhaustive enumeration ---

/// Objective of the problem with the given integer variables pinned,
/// eliminating them by substitution and solving the continuous rest. None
/// when that restriction is infeasible. A deliberately different path from
/// the solver's own bound-pinning relaxations.
fn restricted_objective(p: &MiqpProblem, vals: &[(usize, f64)]) -> Result<Option<f64>, String> {
    let n = p.qp.n;
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for &(i, v) in vals {
        fixed[i] = Some(v);
    }
    let keep: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
    let nc = keep.len();

    let mut offset = p.objective_offset;
    for &(i, vi) in vals {
        offset += p.qp.g[i] * vi;
        for &(j, vj) in vals {
            offset += 0.5 * p.qp.h[i][j] * vi * vj;
        }
    }
    let row_fixed = |row: &[f64]| -> f64 { vals.iter().map(|&(j, vj)| row[j] * vj).sum() };

    if nc == 0 {
        for (row, &b) in p.qp.a_eq.iter().zip(&p.qp.b_eq) {
            if (b - row_fixed(row)).abs() > 1e-8 {
                return Ok(None);
            }
        }
        for (row, &b) in p.qp.a_in.iter().zip(&p.qp.b_in) {
            if b - row_fixed(row) > 1e-8 {
                return Ok(None);
            }
        }
        return Ok(Some(offset));
    }

    let h = DMatrix::from_fn(nc, nc, |a, b| p.qp.h[keep[a]][keep[b]]);
    let g = DVector::from_fn(nc, |a, _| {
        p.qp.g[keep[a]]
            + vals
                .iter()
                .map(|&(j, vj)| p.qp.h[keep[a]][j] * vj)
                .sum::<f64>()
    });
    let a_eq = DMatrix::from_fn(p.qp.a_eq.len(), nc, |r, c| p.qp.a_eq[r][keep[c]]);
    let b_eq = DVector::from_fn(p.qp.b_eq.len(), |r, _| {
        p.qp.b_eq[r] - row_fixed(&p.qp.a_eq[r])
    });
    let mut in_rows: Vec<Vec<f64>> = p
        .qp
        .a_in
        .iter()
        .map(|row| keep.iter().map(|&c| row[c]).collect())
        .collect();
    let mut in_rhs: Vec<f64> = p
        .qp
        .a_in
        .iter()
        .zip(&p.qp.b_in)
        .map(|(row, &b)| b - row_fixed(row))
        .collect();
    for (c, &i) in keep.iter().enumerate() {
        if p.lower[i].is_finite() {
            let mut r = vec![0.0; nc];
            r[c] = 1.0;
            in_rows.push(r);
            in_rhs.push(p.lower[i]);
        }
        if p.upper[i].is_finite() {
            let mut r = vec![0.0; nc];
            r[c] = -1.0;
            in_rows.push(r);
            in_rhs.push(-p.upper[i]);
        }
    }
    let a_in = DMatrix::from_fn(in_rows.len(), nc, |r, c| in_rows[r][c]);
    let b_in = DVector::from_column_slice(&in_rhs);
    match solve_qp(&QpProblem {
        h,
        g,
        a_eq,
        b_eq,
        a_in,
        b_in,
    }) {
        Ok(sol) => Ok(Some(sol.objective + offset)),
        Err(QpError::Infeasible { .. }) => Ok(None),
        Err(e) => Err(format!("restricted solve failed: {e}")),
    }
}

fn enumeration_minimum(
    p: &MiqpProblem,
    domains: &[(usize, Vec<f64>)],
) -> Result<f64, String> {
    let mut best = f64::INFINITY;
    let mut counters = vec![0usize; domains.len()];
    loop {
        let vals: Vec<(usize, f64)> = domains
            .iter()
            .zip(&counters)
            .map(|((i, dom), &k)| (*i, dom[k]))
            .collect();
        if let Some(obj) = restricted_objective(p, &vals)? {
            best = best.min(obj);
        }
        let mut pos = domains.len();
        loop {
            if pos == 0 {
                return if best.is_finite() {
                    Ok(best)
                } else {
                    Err("every integer assignment infeasible".into())
                };
            }
            pos -= 1;
            counters[pos] += 1;
            if counters[pos] < domains[pos].1.len() {
                break;
            }
            counters[pos] = 0;
        }
    }
}

/// Random box-bounded MIQP with a guaranteed feasible mixed-integer point.
/// Every fifth Hessian is singular PSD to exercise the solver's
/// regularization; every third problem carries an equality row.
fn random_miqp(rng: &mut ChaCha8Rng, trial: usize) -> (MiqpProblem, Vec<(usize, Vec<f64>)>) {
    let n_cont: usize = rng.gen_range(0..=3);
    let n_int: usize = rng.gen_range(4..=12);
    let n = n_cont + n_int;

    let rank = if trial % 5 == 0 { n - 1 } else { n };
    let b = DMatrix::from_fn(n, rank, |_, _| rng.gen_range(-1.0..1.0));
    let h = &b * b.transpose() / n as f64;
    let g = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));

    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut x0 = DVector::zeros(n);
    for i in 0..n_cont {
        lower[i] = -3.0;
        upper[i] = 3.0;
        x0[i] = rng.gen_range(-3.0..3.0);
    }
    let mut integers = Vec::with_capacity(n_int);
    let mut domains = Vec::with_capacity(n_int);
    // Domain sizes of 2 to 4 values, shrinking once the full enumeration
    // would pass ~4k assignments.
    let mut product = 1usize;
    for k in 0..n_int {
        let i = n_cont + k;
        let mut d: usize = rng.gen_range(2..=4);
        if product * d > 4096 {
            d = 2;
        }
        if product * d > 4096 {
            d = 1;
        }
        product *= d;
        let lo = rng.gen_range(-2i64..=0);
        let hi = lo + d as i64 - 1;
        lower[i] = lo as f64;
        upper[i] = hi as f64;
        integers.push(i);
        domains.push((i, (lo..=hi).map(|v| v as f64).collect()));
        x0[i] = rng.gen_range(lo..=hi) as f64;
    }

    let mut qp = QpProblem::unconstrained(h, g);
    let m_in: usize = rng.gen_range(0..=2);
    if m_in > 0 {
        let a = DMatrix::from_fn(m_in, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(m_in, |r, _| {
            a.row(r).transpose().dot(&x0) - rng.gen_range(0.1..1.0)
        });
        qp.a_in = a;
        qp.b_in = b;
    }
    if trial % 3 == 0 {
        let a = DMatrix::from_fn(1, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_element(1, a.row(0).transpose().dot(&x0));
        qp.a_eq = a;
        qp.b_eq = b;
    }
    let prob = MiqpProblem {
        qp: QpProblemData::from_problem(&qp),
        integers,
        lower,
        upper,
        objective_offset: rng.gen_range(-1.0..1.0),
    };
    (prob, domains)
}

fn criterion3(fx: &Fixture) -> Crit {
    // Exact solves: no gap shortcut, so any mismatch is the solver's fault.
    let exact = MiqpConfig {
        gap_tol: 0.0,
        ..MiqpConfig::default()
    };
    let mut artifact = String::new();

    // Single-step scheduling instance at the heaviest bundled hour. The
    // movement splits force |position - prior| within the per-step limit, so
    // assignments outside that window are infeasible and enumeration only
    // needs the window around the parked prior.
    let cfg = RhoConfig {
        horizon: 1,
        miqp: exact,
        ..RhoConfig::default()
    };
    let fc = forecast_profiles(&fx.f, &fx.idx, &fx.profiles, 19.0 * 3600.0, 1, 3600.0)
        .map_err(err)?;
    let prior = PriorState::new(&fx.devices);
    let built =
        build_rho_problem(&fx.f, &fx.idx, &fx.devices, &cfg, &fc, &prior).map_err(err)?;
    let sol = solve_miqp(&built.miqp, &cfg.miqp).map_err(err)?;
    if sol.status != MiqpStatus::Optimal {
        return Err(format!("scheduling solve ended {:?}", sol.status));
    }
    let mut domains: Vec<(usize, Vec<f64>)> = Vec::new();
    for (k, ctrl) in fx.devices.tap_controls.iter().enumerate() {
        let m = ctrl.spec.per_step_limit.min(ctrl.spec.daily_limit) as i32;
        let (lo, hi) = (ctrl.spec.tap_min.max(-m), ctrl.spec.tap_max.min(m));
        domains.push((built.vars.tap(0, k), (lo..=hi).map(f64::from).collect()));
    }
    for (k, ctrl) in fx.devices.cap_controls.iter().enumerate() {
        let m = ctrl.spec.per_step_limit.min(ctrl.spec.daily_limit);
        let hi = ctrl.spec.max_steps.min(m);
        domains.push((built.vars.cap(0, k), (0..=hi).map(f64::from).collect()));
    }
    let combos: usize = domains.iter().map(|(_, d)| d.len()).product();
    let best = enumeration_minimum(&built.miqp, &domains)?;
    let gap = (sol.objective - best).abs();
    if gap > 1e-6 {
        return Err(format!(
            "scheduling objective {:.9e} vs enumeration {best:.9e}, gap {gap:.3e}",
            sol.objective
        ));
    }
    writeln!(
        artifact,
        "schedule: objective {:e} enumeration {best:e} nodes {} assignments {combos}",
        sol.objective, sol.nodes_explored
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0x3ac3);
    let mut worst = gap;
    for trial in 0..50 {
        let (prob, domains) = random_miqp(&mut rng, trial);
        let sol = solve_miqp(&prob, &exact).map_err(|e| format!("trial {trial}: {e}"))?;
        if sol.status != MiqpStatus::Optimal {
            return Err(format!("trial {trial}: solve ended {:?}", sol.status));
        }
        let best =
            enumeration_minimum(&prob, &domains).map_err(|e| format!("trial {trial}: {e}"))?;
        let gap = (sol.objective - best).abs();
        worst = worst.max(gap);
        if gap > 1e-6 {
            return Err(format!(
                "trial {trial}: objective {:.9e} vs enumeration {best:.9e}, gap {gap:.3e}",
                sol.objective
            ));
        }
        writeln!(
            artifact,
            "trial {trial}: objective {:e} enumeration {best:e} nodes {}",
            sol.objective, sol.nodes_explored
        )
        .unwrap();
    }
    Ok((
        format!(
            "scheduling instance ({combos} assignments) and 50 random problems match \
             enumeration, worst gap {worst:.2e}"
        ),
        artifact,
    ))
}

// --- check 4: exact schedule beats the rounded relaxation on the plant ---

fn criterion4(fx: &Fixture) -> Crit {
    let snap = heavy_snapshot(fx);
    let (miqp, vars, exact) = solve_study(fx, &snap)?;
    let rounded_sol = round_relaxation(&miqp)
        .map_err(err)?
        .ok_or("rounded relaxation infeasible")?;
    let rounded = extract_schedule(&rounded_sol, &vars, vec![]);
    let l_exact = schedule_losses(fx, &snap, &exact)?;
    let l_rounded = schedule_losses(fx, &snap, &rounded)?;
    if l_exact > l_rounded {
        return Err(format!(
            "plant losses {l_exact:.6} under the exact schedule exceed {l_rounded:.6} \
             under the rounded one"
        ));
    }
    let strict = l_exact < l_rounded;
    let mut artifact = String::new();
    writeln!(
        artifact,
        "exact: taps {:?} caps {:?} losses {l_exact:e}",
        exact.taps, exact.cap_steps
    )
    .unwrap();
    writeln!(
        artifact,
        "rounded: taps {:?} caps {:?} losses {l_rounded:e}",
        rounded.taps, rounded.cap_steps
    )
    .unwrap();
    Ok((
        format!(
            "plant losses {l_exact:.6} (exact) vs {l_rounded:.6} (rounded), \
             margin {:.3e}, strictly better: {strict}",
            l_rounded - l_exact
        ),
        artifact,
    ))
}

// --- check 5: stability bound bracket and closed-loop settling ---

fn criterion5(fx: &Fixture) -> Crit {
    let sens = SensitivityModel::build(&fx.f, &fx.idx, &fx.devices).map_err(err)?;
    let m_ff = der_sensitivity(&fx.f, &fx.idx, &fx.devices, &sens.m);
    let bound = stability_bound(&m_ff).map_err(err)?;

    // Independent bracket on the top eigenvalue: the Rayleigh quotient never
    // overshoots it, and the residual bounds the distance to the nearest
    // eigenvalue, which is the top one once the iterate has converged.
    let n = m_ff.nrows();
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut rho = 0.0;
    let mut resid = f64::INFINITY;
    for _ in 0..200_000 {
        let y = &m_ff * &x;
        rho = x.dot(&y);
        resid = (&y - &x * rho).norm();
        if resid <= 1e-11 {
            break;
        }
        x = &y / y.norm();
    }
    if resid > 1e-11 {
        return Err(format!("power iteration stalled at residual {resid:.3e}"));
    }
    let (lo, hi) = (2.0 / (rho + resid), 2.0 / rho);
    if bound < lo - 1e-6 || bound > hi + 1e-6 {
        return Err(format!(
            "stability bound {bound:.9e} outside bracket [{lo:.9e}, {hi:.9e}]"
        ));
    }

    // Closed loop on the linear voltage model at the evening point. The wind
    // slots chase references beyond their VAR authority, so they saturate
    // early and stay pinned; the others settle to interior targets.
    let snap = heavy_snapshot(fx);
    let taps0 = vec![0i32; fx.devices.tap_controls.len()];
    let slots = der_slot_indices(fx);
    let mu_ff = gather(&slots, &sens.mu(&snap, &taps0));
    let q_lim = reactive_limits(&fx.f, &fx.idx, &fx.devices, &snap.p_inv);
    let pv = [0.7, 0.2, 0.45];
    let mut pv_seen = 0;
    let mut q_target = DVector::zeros(slots.len());
    for (j, d) in fx.devices.der_slots.iter().enumerate() {
        q_target[j] = if d.bus == 2 {
            pv_seen += 1;
            pv[pv_seen - 1] * q_lim[j]
        } else {
            1.8 * q_lim[j]
        };
    }
    let vref = &m_ff * &q_target + &mu_ff;

    let trace = |frac: f64| -> Result<(Vec<f64>, Option<usize>), String> {
        let gain = frac * bound;
        let mut q = DVector::zeros(slots.len());
        let mut errs = Vec::with_capacity(500);
        let mut first_sat = None;
        for k in 0..500 {
            let v = &m_ff * &q + &mu_ff;
            errs.push((&v - &vref).norm_squared());
            let next = integral_step(&q, &v, &vref, gain, &q_lim).map_err(err)?;
            if first_sat.is_none()
                && (0..q_lim.len())
                    .any(|j| q_lim[j] > 0.0 && (next[j].abs() - q_lim[j]).abs() < 1e-12)
            {
                first_sat = Some(k);
            }
            q = next;
        }
        Ok((errs, first_sat))
    };

    let (fast, fast_sat) = trace(0.8)?;
    let sat = fast_sat.ok_or("no saturation event at 0.8 of the bound")?;
    let e_inf = *fast.last().unwrap();
    for k in (sat + 1)..fast.len() {
        if fast[k] > fast[k - 1] + 1e-15 {
            return Err(format!(
                "tracking error rose at iteration {k} (after saturation at {sat})"
            ));
        }
    }
    let settle = (1..fast.len())
        .find(|&k| (fast[k] - e_inf).abs() <= 1e-10)
        .ok_or("no approach within 1e-10 of the limit")?;
    if settle > 200 {
        return Err(format!("settled at iteration {settle}, budget 200"));
    }

    let (slow, _) = trace(0.5)?;
    let s_inf = *slow.last().unwrap();
    let gap20 = (slow[20] - s_inf).abs();
    if gap20 > 1e-2 * s_inf {
        return Err(format!(
            "error at iteration 20 still {:.3e} relative to final",
            gap20 / s_inf
        ));
    }

    let mut artifact = String::new();
    writeln!(artifact, "bound {bound:e} bracket [{lo:e}, {hi:e}]").unwrap();
    writeln!(artifact, "settle {settle} sat {sat} e_inf {e_inf:e}").unwrap();
    for (name, errs) in [("fast", &fast), ("slow", &slow)] {
        for (k, e) in errs.iter().take(30).enumerate() {
            writeln!(artifact, "{name} {k} {e:e}").unwrap();
        }
    }
    Ok((
        format!(
            "bound {bound:.9e} inside bracket of width {:.1e}; 0.8 gain monotone, \
             settled at iteration {settle}; 0.5 gain within {:.1e} of final by 20",
            hi - lo,
            gap20 / s_inf.max(1e-300)
        ),
        artifact,
    ))
}

// --- check 6: projected step contracts at the spectral factor ---

fn criterion6(fx: &Fixture) -> Crit {
    let sens = SensitivityModel::build(&fx.f, &fx.idx, &fx.devices).map_err(err)?;
    let m_ff = der_sensitivity(&fx.f, &fx.idx, &fx.devices, &sens.m);
    let bound = stability_bound(&m_ff).map_err(err)?;
    let snap = heavy_snapshot(fx);
    let taps0 = vec![0i32; fx.devices.tap_controls.len()];
    let slots = der_slot_indices(fx);
    let mu_ff = gather(&slots, &sens.mu(&snap, &taps0));
    let q_lim = reactive_limits(&fx.f, &fx.idx, &fx.devices, &snap.p_inv);
    let n = q_lim.len();

    let mut rng = ChaCha8Rng::seed_from_u64(0x6a17);
    let mut artifact = String::new();
    let mut worst = f64::NEG_INFINITY;
    for pair in 0..100 {
        // Gains on both sides of the stability edge: the factor bound holds
        // regardless, it just stops being a contraction past it.
        let gain = rng.gen_range(0.05..1.15) * bound;
        let factor = contraction_factor(&m_ff, gain);
        let vref = DVector::from_fn(n, |_, _| 1.0 + rng.gen_range(-0.05..0.05));
        let mut draw = || DVector::from_fn(n, |j, _| rng.gen_range(-q_lim[j]..q_lim[j]));
        let (q1, q2) = (draw(), draw());
        let step = |q: &DVector<f64>| -> Result<DVector<f64>, String> {
            let v = &m_ff * q + &mu_ff;
            integral_step(q, &v, &vref, gain, &q_lim).map_err(err)
        };
        let d0 = (&q1 - &q2).norm();
        let d1 = (step(&q1)? - step(&q2)?).norm();
        if d1 > factor * d0 + 1e-12 {
            return Err(format!(
                "pair {pair}: post-step distance {d1:.12e} exceeds {factor:.9} * {d0:.12e}"
            ));
        }
        worst = worst.max(d1 - factor * d0);
        writeln!(artifact, "pair {pair}: d1 {d1:e} factor {factor:e} d0 {d0:e}").unwrap();
    }
    Ok((
        format!("100 random pairs contract, worst slack {worst:.2e} against 1e-12"),
        artifact,
    ))
}

// --- check 7: integral steady state beats droop and open-loop dispatch ---

fn criterion7(fx: &Fixture) -> Crit {
    let snap = heavy_snapshot(fx);
    let (_, _, sched) = solve_study(fx, &snap)?;
    let cfg = study_config();
    let (w_lo, w_hi) = cfg.planning_window();
    let slots = der_slot_indices(fx);
    let vref = gather(&slots, &project_reference(&sched.nu, w_lo, w_hi));
    let outcome = static_tracking_experiment(
        &fx.f,
        &fx.idx,
        &fx.devices,
        &snap,
        &sched.taps,
        &sched.cap_steps,
        &vref,
        &TrackingConfig::default(),
    )
    .map_err(err)?;
    let (i2, d2, o2) = (
        outcome.integral_error.powi(2),
        outcome.droop_error.powi(2),
        outcome.open_loop_error.powi(2),
    );
    if i2 > d2 {
        return Err(format!("integral steady error {i2:.3e} exceeds droop {d2:.3e}"));
    }
    if i2 > o2 {
        return Err(format!(
            "integral steady error {i2:.3e} exceeds open-loop dispatch {o2:.3e}"
        ));
    }
    let mut artifact = String::new();
    writeln!(
        artifact,
        "integral {:e} iters {} droop {:e} gain {:e} attempts {} open {:e}",
        outcome.integral_error,
        outcome.integral_iters,
        outcome.droop_error,
        outcome.droop_gain,
        outcome.droop_attempts,
        outcome.open_loop_error
    )
    .unwrap();
    Ok((
        format!(
            "steady squared errors: integral {i2:.3e} <= open-loop {o2:.3e} <= droop {d2:.3e} \
             (droop gain {:.4} after {} backoffs)",
            outcome.droop_gain, outcome.droop_attempts
        ),
        artifact,
    ))
}

// --- check 8: full day, violations eliminated, losses reduced, limits kept ---

fn criterion8(fx: &Fixture) -> Crit {
    let run = |mode: ControlMode| -> Result<vvc_core::sim::SimResult, String> {
        let cfg = ScenarioConfig {
            mode,
            lower_period_s: 5.0,
            ..ScenarioConfig::default()
        };
        run_scenario(&fx.f, &fx.profiles, &cfg).map_err(err)
    };
    let base = run(ControlMode::NoControl)?;
    let two = run(ControlMode::TwoLayer)?;

    if base.metrics.violation_ticks == 0 {
        return Err("uncontrolled day shows no violations; nothing to fix".into());
    }
    if two.metrics.violation_ticks != 0 {
        return Err(format!(
            "controlled day still has {} violation ticks",
            two.metrics.violation_ticks
        ));
    }
    if two.metrics.energy_loss_puh >= base.metrics.energy_loss_puh {
        return Err(format!(
            "loss energy {:.6} pu-h under control not below {:.6} uncontrolled",
            two.metrics.energy_loss_puh, base.metrics.energy_loss_puh
        ));
    }

    // Movement audit against each device's own limits. The daily window is
    // 24 scheduling steps, exactly this horizon.
    let mut prev_taps = vec![0i32; fx.devices.tap_controls.len()];
    let mut prev_caps = vec![0u32; fx.devices.cap_controls.len()];
    let mut tap_total = vec![0u32; prev_taps.len()];
    let mut cap_total = vec![0u32; prev_caps.len()];
    for (t_s, sched) in &two.schedules {
        for (k, ctrl) in fx.devices.tap_controls.iter().enumerate() {
            let moved = sched.taps[k].abs_diff(prev_taps[k]);
            if moved > ctrl.spec.per_step_limit {
                return Err(format!(
                    "tap {k} moved {moved} steps at t={t_s}s, per-step limit {}",
                    ctrl.spec.per_step_limit
                ));
            }
            tap_total[k] += moved;
        }
        for (k, ctrl) in fx.devices.cap_controls.iter().enumerate() {
            let moved = sched.cap_steps[k].abs_diff(prev_caps[k]);
            if moved > ctrl.spec.per_step_limit {
                return Err(format!(
                    "capacitor {k} moved {moved} steps at t={t_s}s, per-step limit {}",
                    ctrl.spec.per_step_limit
                ));
            }
            cap_total[k] += moved;
        }
        prev_taps = sched.taps.clone();
        prev_caps = sched.cap_steps.clone();
    }
    for (k, ctrl) in fx.devices.tap_controls.iter().enumerate() {
        if tap_total[k] > ctrl.spec.daily_limit {
            return Err(format!(
                "tap {k} moved {} steps over the day, daily limit {}",
                tap_total[k], ctrl.spec.daily_limit
            ));
        }
    }
    for (k, ctrl) in fx.devices.cap_controls.iter().enumerate() {
        if cap_total[k] > ctrl.spec.daily_limit {
            return Err(format!(
                "capacitor {k} moved {} steps over the day, daily limit {}",
                cap_total[k], ctrl.spec.daily_limit
            ));
        }
    }
    // Devices hold between boundaries: every tick carries its hour's plan.
    let ticks_per_upper = 720;
    for (i, rec) in two.records.iter().enumerate() {
        let (_, sched) = &two.schedules[i / ticks_per_upper];
        if rec.taps != sched.taps || rec.cap_steps != sched.cap_steps {
            return Err(format!("device settings drifted mid-hour at t={}s", rec.t_s));
        }
    }

    let mut artifact = String::new();
    for (name, r) in [("no_control", &base), ("two_layer", &two)] {
        let m = &r.metrics;
        writeln!(
            artifact,
            "{name}: ticks {} violation_ticks {} violation_slots {} energy {:e} \
             v_min {:e} v_max {:e}",
            m.ticks, m.violation_ticks, m.violation_slots, m.energy_loss_puh, m.v_min, m.v_max
        )
        .unwrap();
    }
    for (t_s, sched) in &two.schedules {
        writeln!(
            artifact,
            "plan {}h: taps {:?} caps {:?} objective {:e}",
            t_s / 3600.0,
            sched.taps,
            sched.cap_steps,
            sched.objective
        )
        .unwrap();
    }
    Ok((
        format!(
            "no_control {} violation ticks (energy {:.4} pu-h), two_layer 0 \
             (energy {:.4} pu-h, v_min {:.4}), movement within all limits",
            base.metrics.violation_ticks,
            base.metrics.energy_loss_puh,
            two.metrics.energy_loss_puh,
            two.metrics.v_min
        ),
        artifact,
    ))
}

// --- check 9: checks 3 through 8 reproduce byte for byte ---

fn criterion9(fx: &Fixture, first: &BTreeMap<usize, String>) -> Crit {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let reruns: [(usize, Crit); 6] = [
        (3, criterion3(fx)),
        (4, criterion4(fx)),
        (5, criterion5(fx)),
        (6, criterion6(fx)),
        (7, criterion7(fx)),
        (8, criterion8(fx)),
    ];
    let mut total = 0usize;
    for (id, outcome) in &reruns {
        let (_, again) = outcome
            .as_ref()
            .map_err(|e| format!("check {id} failed on rerun: {e}"))?;
        let earlier = &first[id];
        for (run, content) in [("run1", earlier.as_str()), ("run2", again.as_str())] {
            let path = dir.join(run).join(format!("check{id}.txt"));
            std::fs::create_dir_all(path.parent().unwrap()).map_err(err)?;
            std::fs::write(&path, content).map_err(err)?;
        }
        let b1 = std::fs::read(dir.join("run1").join(format!("check{id}.txt"))).map_err(err)?;
        let b2 = std::fs::read(dir.join("run2").join(format!("check{id}.txt"))).map_err(err)?;
        if b1 != b2 {
            return Err(format!(
                "check {id} result files differ ({} vs {} bytes)",
                b1.len(),
                b2.len()
            ));
        }
        total += b1.len();
    }
    Ok((
        format!("checks 3-8 rerun byte-identical (6 result files, {total} bytes)"),
        String::new(),
    ))
}

fn report(id: usize, budget_s: f64, started: Instant, outcome: &Crit, failures: &mut Vec<String>) {
    let dt = started.elapsed().as_secs_f64();
    let line = match outcome {
        Ok((detail, _)) if dt <= budget_s => format!("criterion {id}: PASS ({dt:.2}s) {detail}"),
        Ok((detail, _)) => {
            format!("criterion {id}: FAIL ({dt:.2}s, budget {budget_s:.0}s) {detail}")
        }
        Err(reason) => format!("criterion {id}: FAIL ({dt:.2}s) {reason}"),
    };
    println!("{line}");
    if line.contains(": FAIL") {
        failures.push(line);
    }
}

#[test]
fn acceptance() {
    let fx = fixture();
    let mut failures = Vec::new();
    let mut artifacts: BTreeMap<usize, String> = BTreeMap::new();

    let t = Instant::now();
    let r = criterion1();
    report(1, 1.0, t, &r, &mut failures);

    let t = Instant::now();
    let r = criterion2(&fx);
    report(2, 1.0, t, &r, &mut failures);

    let budgets = [60.0, 10.0, 5.0, 5.0, 30.0, 600.0];
    let checks: [fn(&Fixture) -> Crit; 6] = [
        criterion3, criterion4, criterion5, criterion6, criterion7, criterion8,
    ];
    for (i, (check, budget)) in checks.iter().zip(budgets).enumerate() {
        let id = i + 3;
        let t = Instant::now();
        let r = check(&fx);
        report(id, budget, t, &r, &mut failures);
        if let Ok((_, artifact)) = &r {
            artifacts.insert(id, artifact.clone());
        }
    }

    let t = Instant::now();
    let r = if artifacts.len() == 6 {
        criterion9(&fx, &artifacts)
    } else {
        Err("earlier checks failed, rerun comparison skipped".into())
    };
    report(9, f64::INFINITY, t, &r, &mut failures);

    assert!(
        failures.is_empty(),
        "acceptance criteria failed:\n{}",
        failures.join("\n")
    );
}

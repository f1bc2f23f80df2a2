//! Closed-loop simulation of both control layers over the nonlinear plant.
//!
//! The harness ticks at the lower-layer period. On ticks that land on an
//! upper-layer boundary it forecasts, schedules, applies the first-step
//! device settings, and projects the scheduled voltages into references for
//! the inverters. Every tick it runs one local control update against the
//! most recent plant solution, then re-solves the plant at the instantaneous
//! profile samples. The scheduler sees hourly means; the plant sees the
//! fast samples, so intra-step fluctuation is exactly what the lower layer
//! has to absorb.

use crate::control::{
    der_sensitivity, droop_step, integral_step, project_reference, reactive_limits,
    stability_bound, ControlError,
};
use crate::feeder::{DeviceIndex, Feeder, FeederError, FeederIndex};
use crate::linear_flow::{Injections, LinearFlowError, SensitivityModel};
use crate::miqp::{round_relaxation, MiqpError};
use crate::power_flow::{solve_plant, PlantConfig, PlantError, PlantState};
use crate::profiles::Profile;
use crate::qp::{solve_qp, QpError, QpProblem};
use crate::scheduler::{
    build_rho_problem, extract_schedule, forecast_profiles_periodic, schedule, DeviceSchedule,
    PriorState, RhoConfig, ScheduleError,
};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlMode {
    /// Devices parked, inverters idle: the uncontrolled baseline.
    NoControl,
    /// Hourly schedule only; inverters hold zero VARs between boundaries.
    UpperOnly,
    /// Schedule plus projected-integral inverter control.
    TwoLayer,
    /// Schedule plus memoryless droop instead of the integrator.
    TwoLayerDroop,
    /// Upper layer solved by rounding the relaxation instead of exact MIQP.
    RoundedRelaxationUpper,
}

impl ControlMode {
    pub fn name(self) -> &'static str {
        match self {
            ControlMode::NoControl => "no_control",
            ControlMode::UpperOnly => "upper_only",
            ControlMode::TwoLayer => "two_layer",
            ControlMode::TwoLayerDroop => "two_layer_droop",
            ControlMode::RoundedRelaxationUpper => "rounded_relaxation_upper",
        }
    }

    pub fn parse(s: &str) -> Option<ControlMode> {
        Some(match s {
            "no_control" => ControlMode::NoControl,
            "upper_only" => ControlMode::UpperOnly,
            "two_layer" => ControlMode::TwoLayer,
            "two_layer_droop" => ControlMode::TwoLayerDroop,
            "rounded_relaxation_upper" => ControlMode::RoundedRelaxationUpper,
            _ => return None,
        })
    }

    fn runs_upper(self) -> bool {
        self != ControlMode::NoControl
    }

    fn runs_lower(self) -> bool {
        matches!(self, ControlMode::TwoLayer | ControlMode::TwoLayerDroop)
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub mode: ControlMode,
    pub duration_s: f64,
    pub upper_period_s: f64,
    pub lower_period_s: f64,
    /// Offset into the (periodic) profiles at tick zero.
    pub start_s: f64,
    /// Integral gain as a fraction of the stability bound.
    pub gain_fraction: f64,
    /// Droop gain; None derives a contractive default from the bound.
    pub droop_gain: Option<f64>,
    /// Multiplicative forecast perturbation amplitude for robustness
    /// experiments; 0 leaves forecasts exact.
    pub forecast_noise: f64,
    /// Seed for the forecast perturbation stream.
    pub seed: u64,
    pub rho: RhoConfig,
    pub plant: PlantConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            mode: ControlMode::TwoLayer,
            duration_s: 86_400.0,
            upper_period_s: 3_600.0,
            lower_period_s: 60.0,
            start_s: 0.0,
            gain_fraction: 0.8,
            droop_gain: None,
            forecast_noise: 0.0,
            seed: 0,
            rho: RhoConfig::default(),
            plant: PlantConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("lower period {lower_s}s must evenly divide the upper period {upper_s}s")]
    PeriodMismatch { lower_s: f64, upper_s: f64 },
    #[error("duration {duration_s}s must be a positive multiple of the upper period {upper_s}s")]
    DurationMismatch { duration_s: f64, upper_s: f64 },
    #[error("profile {0:?} referenced by the feeder is not loaded")]
    MissingProfile(String),
    #[error("plant failed to converge at t={t_s}s: {source}")]
    Plant { t_s: f64, source: PlantError },
    #[error("rounded-relaxation schedule infeasible at t={t_s}s")]
    RoundedInfeasible { t_s: f64 },
    #[error("droop gain failed to converge after {attempts} backoff attempts")]
    DroopDiverged { attempts: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Linear(#[from] LinearFlowError),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Miqp(#[from] MiqpError),
    #[error("open-loop dispatch failed: {0}")]
    Qp(#[from] QpError),
}

#[derive(Clone, Debug)]
pub struct TickRecord {
    pub t_s: f64,
    /// Squared voltages per bus-phase slot, from the plant.
    pub v: DVector<f64>,
    pub losses: f64,
    /// Inverter VARs per DER slot (not per bus-phase).
    pub q_inv: DVector<f64>,
    pub taps: Vec<i32>,
    pub cap_steps: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct SimMetrics {
    pub ticks: usize,
    /// Ticks with at least one bus-phase outside the window.
    pub violation_ticks: usize,
    /// Total bus-phase × tick violations.
    pub violation_slots: usize,
    /// Time integral of series losses, pu·h.
    pub energy_loss_puh: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug)]
pub struct SimResult {
    pub records: Vec<TickRecord>,
    pub schedules: Vec<(f64, DeviceSchedule)>,
    pub metrics: SimMetrics,
    /// Stability bound of the DER coupling (0 when no DERs).
    pub stability_bound: f64,
    /// Gain actually applied by the lower layer (0 when it never ran).
    pub gain: f64,
}

/// Violation counts use the squared window; energy integrates the held
/// losses exactly (zero-order hold makes the rectangle rule exact).
pub fn compute_metrics(
    records: &[TickRecord],
    lower_period_s: f64,
    v_lo: f64,
    v_hi: f64,
) -> SimMetrics {
    let mut violation_ticks = 0;
    let mut violation_slots = 0;
    let mut energy = 0.0;
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    for rec in records {
        let bad = rec.v.iter().filter(|&&v| v < v_lo || v > v_hi).count();
        violation_slots += bad;
        violation_ticks += usize::from(bad > 0);
        energy += rec.losses * lower_period_s / 3600.0;
        v_min = v_min.min(rec.v.min());
        v_max = v_max.max(rec.v.max());
    }
    SimMetrics {
        ticks: records.len(),
        violation_ticks,
        violation_slots,
        energy_loss_puh: energy,
        v_min,
        v_max,
    }
}

fn as_multiple(a: f64, b: f64) -> Option<usize> {
    if !(a > 0.0 && b > 0.0) {
        return None;
    }
    let ratio = a / b;
    let n = ratio.round();
    (n >= 1.0 && (ratio - n).abs() <= 1e-9 * ratio).then_some(n as usize)
}

/// Scales every forecast entry by 1 + amp·u with u uniform on [−1, 1].
/// The stream is keyed by (seed, boundary), so a boundary's draw does not
/// depend on how many boundaries preceded it.
fn perturb_forecast(fc: &mut crate::scheduler::ForecastSet, amp: f64, seed: u64, boundary: usize) {
    use rand::{Rng, SeedableRng};
    let key = seed ^ (boundary as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(key);
    let mut scale = |vecs: &mut Vec<DVector<f64>>| {
        for v in vecs.iter_mut() {
            for x in v.iter_mut() {
                *x *= (1.0 + amp * rng.gen_range(-1.0..=1.0)).max(0.0);
            }
        }
    };
    scale(&mut fc.p_c);
    scale(&mut fc.q_c);
    scale(&mut fc.p_inv);
}

fn profile_factor(
    profiles: &BTreeMap<String, Profile>,
    name: &Option<String>,
    t_s: f64,
) -> Result<f64, SimError> {
    match name {
        None => Ok(1.0),
        Some(n) => Ok(profiles
            .get(n)
            .ok_or_else(|| SimError::MissingProfile(n.clone()))?
            .sample_periodic(t_s)),
    }
}

/// Instantaneous consumption and DER active output at absolute time `t_s`,
/// with `q_inv`/`q_cap` left zero for the caller to fill.
pub fn instantaneous_injections(
    feeder: &Feeder,
    idx: &FeederIndex,
    profiles: &BTreeMap<String, Profile>,
    t_s: f64,
) -> Result<Injections, SimError> {
    let mut inj = Injections::zeros(idx.n_bus_phases());
    for bus in feeder.buses.iter().skip(1) {
        let lf = profile_factor(profiles, &bus.load_profile, t_s)?;
        let df = profile_factor(profiles, &bus.der_profile, t_s)?;
        for (pos, p) in bus.phases.iter().enumerate() {
            let slot = idx.bus_phase_slot(feeder, bus.id, p).unwrap();
            inj.p_c[slot] = bus.load_p[pos] * lf;
            inj.q_c[slot] = bus.load_q[pos] * lf;
            inj.p_inv[slot] = bus.der_p[pos] * df;
        }
    }
    Ok(inj)
}

fn gather_der(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    full: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_iterator(
        devices.der_slots.len(),
        devices
            .der_slots
            .iter()
            .map(|d| full[idx.bus_phase_slot(feeder, d.bus, d.phase).unwrap()]),
    )
}

pub fn run_scenario(
    feeder: &Feeder,
    profiles: &BTreeMap<String, Profile>,
    config: &ScenarioConfig,
) -> Result<SimResult, SimError> {
    let ticks_per_upper =
        as_multiple(config.upper_period_s, config.lower_period_s).ok_or_else(|| {
            SimError::PeriodMismatch {
                lower_s: config.lower_period_s,
                upper_s: config.upper_period_s,
            }
        })?;
    let n_upper = as_multiple(config.duration_s, config.upper_period_s).ok_or_else(|| {
        SimError::DurationMismatch {
            duration_s: config.duration_s,
            upper_s: config.upper_period_s,
        }
    })?;
    let n_ticks = n_upper * ticks_per_upper;

    let idx = FeederIndex::new(feeder)?;
    let devices = DeviceIndex::new(feeder);
    let nder = devices.der_slots.len();

    let (bound, gain) = if config.mode.runs_lower() && nder > 0 {
        let sens = SensitivityModel::build(feeder, &idx, &devices)?;
        let m_ff = der_sensitivity(feeder, &idx, &devices, &sens.m);
        let bound = stability_bound(&m_ff)?;
        let gain = match config.mode {
            ControlMode::TwoLayerDroop => config
                .droop_gain
                // Droop contracts below bound/2; leave a 10% margin.
                .unwrap_or(0.45 * bound),
            _ => config.gain_fraction * bound,
        };
        (bound, gain)
    } else {
        (0.0, 0.0)
    };

    let mut prior = PriorState::new(&devices);
    let mut taps = prior.taps.clone();
    let mut cap_steps = prior.cap_steps.clone();
    let mut q = DVector::zeros(nder);
    let (plan_lo, plan_hi) = config.rho.planning_window();
    let mut vref = DVector::from_element(nder, feeder.vnom.clamp(plan_lo, plan_hi));
    let mut last_state: Option<PlantState> = None;

    let mut records = Vec::with_capacity(n_ticks);
    let mut schedules = Vec::with_capacity(n_upper);

    for k in 0..n_ticks {
        let t_s = config.start_s + k as f64 * config.lower_period_s;

        if k % ticks_per_upper == 0 && config.mode.runs_upper() {
            let mut fc = forecast_profiles_periodic(
                feeder,
                &idx,
                profiles,
                t_s,
                config.rho.horizon,
                config.upper_period_s,
            )?;
            if config.forecast_noise > 0.0 {
                perturb_forecast(
                    &mut fc,
                    config.forecast_noise,
                    config.seed,
                    k / ticks_per_upper,
                );
            }
            let sched = if config.mode == ControlMode::RoundedRelaxationUpper {
                let built = build_rho_problem(feeder, &idx, &devices, &config.rho, &fc, &prior)?;
                let sol = round_relaxation(&built.miqp)?
                    .ok_or(SimError::RoundedInfeasible { t_s })?;
                let out = extract_schedule(&sol, &built.vars, built.warnings);
                prior.apply(&out.taps, &out.cap_steps);
                out
            } else {
                schedule(feeder, &idx, &devices, &config.rho, &fc, &mut prior)?
            };
            taps = sched.taps.clone();
            cap_steps = sched.cap_steps.clone();
            let nu_proj = project_reference(&sched.nu, plan_lo, plan_hi);
            vref = gather_der(feeder, &idx, &devices, &nu_proj);
            schedules.push((t_s, sched));
        }

        let mut inj = instantaneous_injections(feeder, &idx, profiles, t_s)?;
        let q_lim = reactive_limits(feeder, &idx, &devices, &inj.p_inv);

        if config.mode.runs_lower() && nder > 0 {
            let v_meas = match &last_state {
                Some(s) => gather_der(feeder, &idx, &devices, &s.v),
                None => {
                    // Bootstrap: measure the plant as found before acting.
                    let mut boot = inj.clone();
                    let q_bp = devices.der_to_bus_phase(feeder, &idx, q.as_slice());
                    boot.q_inv = DVector::from_vec(q_bp);
                    boot.q_cap = DVector::from_vec(devices.caps_to_q(feeder, &idx, &cap_steps));
                    let st = solve_plant(feeder, &idx, &devices, &boot, &taps, &config.plant)
                        .map_err(|source| SimError::Plant { t_s, source })?;
                    gather_der(feeder, &idx, &devices, &st.v)
                }
            };
            q = match config.mode {
                ControlMode::TwoLayerDroop => droop_step(&v_meas, &vref, gain, &q_lim)?,
                _ => integral_step(&q, &v_meas, &vref, gain, &q_lim)?,
            };
        } else {
            q.fill(0.0);
        }

        inj.q_inv = DVector::from_vec(devices.der_to_bus_phase(feeder, &idx, q.as_slice()));
        inj.q_cap = DVector::from_vec(devices.caps_to_q(feeder, &idx, &cap_steps));
        let state = solve_plant(feeder, &idx, &devices, &inj, &taps, &config.plant)
            .map_err(|source| SimError::Plant { t_s, source })?;
        records.push(TickRecord {
            t_s,
            v: state.v.clone(),
            losses: state.losses,
            q_inv: q.clone(),
            taps: taps.clone(),
            cap_steps: cap_steps.clone(),
        });
        last_state = Some(state);
    }

    let metrics = compute_metrics(
        &records,
        config.lower_period_s,
        config.rho.v_lo,
        config.rho.v_hi,
    );
    Ok(SimResult {
        records,
        schedules,
        metrics,
        stability_bound: bound,
        gain,
    })
}

#[derive(Clone, Debug)]
pub struct TrackingConfig {
    pub gain_fraction: f64,
    /// Initial droop gain as a fraction of the integral stability bound.
    pub droop_start_fraction: f64,
    pub integral_iters: usize,
    pub droop_iters: usize,
    pub droop_attempts: usize,
    pub plant: PlantConfig,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            gain_fraction: 0.8,
            droop_start_fraction: 0.5,
            integral_iters: 500,
            droop_iters: 200,
            droop_attempts: 12,
            plant: PlantConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackingOutcome {
    pub stability_bound: f64,
    pub integral_gain: f64,
    /// ‖v − v_ref‖₂ over DER slots at the integral steady state, plant units.
    pub integral_error: f64,
    pub integral_iters: usize,
    pub droop_gain: f64,
    pub droop_error: f64,
    pub droop_attempts: usize,
    /// Plant error of the open-loop dispatch computed on the linear model.
    pub open_loop_error: f64,
    pub open_loop_q: DVector<f64>,
    /// Per-iteration ‖v − v_ref‖² before each integral update.
    pub integral_trace: Vec<f64>,
    /// Same trace for the droop gain that finally settled.
    pub droop_trace: Vec<f64>,
}

/// Holds injections and device settings fixed and compares three ways of
/// steering inverter VARs at one operating point: the projected integrator,
/// droop with automatic gain backoff, and a one-shot model-based dispatch.
/// All three are judged by the voltage error the nonlinear plant realizes.
pub fn static_tracking_experiment(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    base: &Injections,
    taps: &[i32],
    cap_steps: &[u32],
    vref: &DVector<f64>,
    config: &TrackingConfig,
) -> Result<TrackingOutcome, SimError> {
    let nder = devices.der_slots.len();
    let q_lim = reactive_limits(feeder, idx, devices, &base.p_inv);

    let sens = SensitivityModel::build(feeder, idx, devices)?;
    let m_ff = der_sensitivity(feeder, idx, devices, &sens.m);
    let bound = stability_bound(&m_ff)?;

    let plant_v = |q: &DVector<f64>| -> Result<DVector<f64>, SimError> {
        let mut inj = base.clone();
        inj.q_inv = DVector::from_vec(devices.der_to_bus_phase(feeder, idx, q.as_slice()));
        inj.q_cap = DVector::from_vec(devices.caps_to_q(feeder, idx, cap_steps));
        let st = solve_plant(feeder, idx, devices, &inj, taps, &config.plant)
            .map_err(|source| SimError::Plant { t_s: 0.0, source })?;
        Ok(gather_der(feeder, idx, devices, &st.v))
    };

    // Projected integrator to steady state.
    let integral_gain = config.gain_fraction * bound;
    let mut q = DVector::zeros(nder);
    let mut integral_iters = config.integral_iters;
    let mut integral_trace = Vec::new();
    for it in 0..config.integral_iters {
        let v = plant_v(&q)?;
        integral_trace.push((&v - vref).norm_squared());
        let next = integral_step(&q, &v, vref, integral_gain, &q_lim)?;
        let moved = (&next - &q).amax();
        q = next;
        if moved <= 1e-13 {
            integral_iters = it + 1;
            break;
        }
    }
    let integral_error = (plant_v(&q)? - vref).norm();

    // Droop with gain backoff: halve until the iteration settles.
    let mut droop_gain = config.droop_start_fraction * bound;
    let mut droop_error = f64::NAN;
    let mut droop_trace = Vec::new();
    let mut attempts = 0;
    let mut settled = false;
    while attempts < config.droop_attempts {
        attempts += 1;
        let mut qd = DVector::zeros(nder);
        let mut tail: Vec<DVector<f64>> = Vec::new();
        droop_trace.clear();
        for _ in 0..config.droop_iters {
            let v = plant_v(&qd)?;
            droop_trace.push((&v - vref).norm_squared());
            qd = droop_step(&v, vref, droop_gain, &q_lim)?;
            tail.push(qd.clone());
            if tail.len() > 50 {
                tail.remove(0);
            }
        }
        let last = tail.last().unwrap().clone();
        let spread = tail
            .iter()
            .map(|x| (x - &last).amax())
            .fold(0.0f64, f64::max);
        if tail.len() == 50 && spread <= 1e-8 * (1.0 + last.amax()) {
            droop_error = (plant_v(&last)? - vref).norm();
            settled = true;
            break;
        }
        droop_gain /= 2.0;
    }
    if !settled {
        return Err(SimError::DroopDiverged { attempts });
    }

    // Open-loop dispatch: minimize the linear-model error inside the VAR box,
    // then pay the model mismatch on the plant.
    let mu_ff = gather_der(feeder, idx, devices, &sens.mu(base, taps));
    let h = 2.0 * m_ff.transpose() * &m_ff;
    let g = 2.0 * m_ff.transpose() * (&mu_ff - vref);
    let mut a_in = DMatrix::zeros(2 * nder, nder);
    let mut b_in = DVector::zeros(2 * nder);
    for j in 0..nder {
        a_in[(2 * j, j)] = 1.0;
        b_in[2 * j] = -q_lim[j];
        a_in[(2 * j + 1, j)] = -1.0;
        b_in[2 * j + 1] = -q_lim[j];
    }
    let qp = QpProblem {
        h,
        g,
        a_eq: DMatrix::zeros(0, nder),
        b_eq: DVector::zeros(0),
        a_in,
        b_in,
    };
    let dispatch = solve_qp(&qp)?;
    let open_loop_q = DVector::from_column_slice(dispatch.x.as_slice());
    let open_loop_error = (plant_v(&open_loop_q)? - vref).norm();

    Ok(TrackingOutcome {
        stability_bound: bound,
        integral_gain,
        integral_error,
        integral_iters,
        droop_gain,
        droop_error,
        droop_attempts: attempts,
        open_loop_error,
        open_loop_q,
        integral_trace,
        droop_trace,
    })
}

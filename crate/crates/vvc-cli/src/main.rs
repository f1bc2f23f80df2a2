//! `vvc`: command-line front end over the feeder control library.
//!
//! Subcommands map one-to-one onto library entry points: `validate` and `pf`
//! exercise the feeder model and the nonlinear plant, `linerr` and
//! `stability` emit model-quality diagnostics, `schedule` / `control` /
//! `simulate` run the two control layers separately and together, and `miqp`
//! round-trips scheduling problems as JSON for offline study.
//!
//! Commands that produce a table write CSV to `--out`, or to stdout when the
//! flag is omitted (the human summary is then suppressed so the stream stays
//! parseable). All numeric CSV fields use a fixed 9-significant-digit format
//! so repeated runs are byte-identical. Failures print exactly one
//! `error[<class>]: <message>` line on stderr; the class fixes the exit
//! code: usage 2, validation 3, solver limit 4, plant non-convergence 5.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use vvc_core::control::{
    contraction_factor, der_sensitivity, project_reference, stability_bound, ControlError,
};
use vvc_core::feeder::{DeviceIndex, FeederError};
use vvc_core::io::{self, fmt_sig9, IoError};
use vvc_core::linear_flow::{tap_linearization_error, LinearFlowError, SensitivityModel};
use vvc_core::miqp::{
    solve_miqp, MiqpConfig, MiqpError, MiqpProblem, MiqpSolution, MiqpStatus,
};
use vvc_core::power_flow::{solve_plant, PlantConfig, PlantError};
use vvc_core::profiles::ProfileError;
use vvc_core::qp::QpError;
use vvc_core::scheduler::{
    build_rho_problem, extract_schedule, forecast_profiles_periodic, ForecastSet, PriorState,
    RhoConfig, ScheduleError,
};
use vvc_core::sim::{
    instantaneous_injections, run_scenario, static_tracking_experiment, ControlMode,
    ScenarioConfig, SimError, SimResult, TrackingConfig,
};
use vvc_core::{Feeder, FeederIndex};

#[derive(Parser)]
#[command(name = "vvc", version, about = "Two-layer Volt/VAR control for radial feeders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a feeder file and run every structural check
    Validate(ValidateArgs),
    /// Nonlinear power flow for one feeder snapshot
    Pf(PfArgs),
    /// Tap linearization error swept over the (tap, voltage) grid
    Linerr(LinerrArgs),
    /// DER sensitivity spectrum and the integral gain bound
    Stability(StabilityArgs),
    /// Solve one receding-horizon device schedule from profile forecasts
    Schedule(ScheduleArgs),
    /// Static tracking comparison at one instant: integral, droop, open loop
    Control(ControlArgs),
    /// Closed-loop scenario replay over the profile day
    Simulate(SimulateArgs),
    /// Dump or solve scheduling MIQPs as JSON
    Miqp(MiqpArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Feeder description JSON
    #[arg(long)]
    feeder: PathBuf,
}

#[derive(Args)]
struct PfArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// Injection snapshot JSON: loads, DER output, device positions
    #[arg(long)]
    snapshot: PathBuf,
    /// Settings JSON; command-line flags win over file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LinerrArgs {
    /// Take the tap step and nominal voltage from this feeder's first regulator
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Per-tap ratio step
    #[arg(long)]
    tap_step: Option<f64>,
    /// Squared nominal voltage, pu^2
    #[arg(long)]
    vnom: Option<f64>,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    feeder: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// Directory of profile CSVs keyed by file stem
    #[arg(long)]
    profiles: PathBuf,
    /// Forecast origin, hours into the (periodic) profile day
    #[arg(long, default_value_t = 0.0)]
    at_hour: f64,
    /// Settings JSON; command-line flags win over file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ControlArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// Directory of profile CSVs keyed by file stem
    #[arg(long)]
    profiles: PathBuf,
    /// Snapshot instant, seconds into the profile day
    #[arg(long, default_value_t = 0.0)]
    at_s: f64,
    /// Settings JSON; command-line flags win over file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// Directory of profile CSVs keyed by file stem
    #[arg(long)]
    profiles: PathBuf,
    /// no_control, upper_only, two_layer, two_layer_droop or rounded_relaxation_upper
    #[arg(long)]
    mode: String,
    /// Output directory; detail CSVs plus summary.txt land here
    #[arg(long)]
    out: PathBuf,
    /// Settings JSON; command-line flags win over file values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    duration_h: Option<f64>,
    #[arg(long)]
    upper_period_s: Option<f64>,
    #[arg(long)]
    lower_period_s: Option<f64>,
    /// Offset into the profile day at tick zero, seconds
    #[arg(long)]
    start_s: Option<f64>,
    /// Integral gain as a fraction of the stability bound
    #[arg(long)]
    gain_fraction: Option<f64>,
    /// Fixed droop gain; omit to derive a contractive default
    #[arg(long)]
    droop_gain: Option<f64>,
    /// Multiplicative forecast perturbation amplitude
    #[arg(long)]
    forecast_noise: Option<f64>,
    /// Seed for the forecast perturbation stream; VVL_SEED overrides
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("action").required(true).multiple(false))]
struct MiqpArgs {
    /// Build the scheduling problem and write it as JSON
    #[arg(long, value_name = "FILE", group = "action", requires = "feeder", requires = "profiles")]
    dump: Option<PathBuf>,
    /// Solve a problem file produced by --dump
    #[arg(long, value_name = "FILE", group = "action")]
    solve: Option<PathBuf>,
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Directory of profile CSVs keyed by file stem
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Forecast origin, hours into the (periodic) profile day
    #[arg(long, default_value_t = 0.0)]
    at_hour: f64,
    /// Settings JSON; miqp_* keys override the knobs stored in the dump
    #[arg(long)]
    config: Option<PathBuf>,
    /// Solution values CSV (solve only); stdout summary either way
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One failure class per documented exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Validation(String),
    Solver(String),
    Plant(String),
}

impl Failure {
    fn class(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Validation(_) => "validation",
            Failure::Solver(_) => "solver",
            Failure::Plant(_) => "plant",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Solver(_) => 4,
            Failure::Plant(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Validation(m) | Failure::Solver(m) | Failure::Plant(m) => m,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Failure {
        match e {
            IoError::Read { .. } | IoError::Write { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<ProfileError> for Failure {
    fn from(e: ProfileError) -> Failure {
        match e {
            ProfileError::Io { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<FeederError> for Failure {
    fn from(e: FeederError) -> Failure {
        Failure::Validation(e.to_string())
    }
}

impl From<LinearFlowError> for Failure {
    fn from(e: LinearFlowError) -> Failure {
        Failure::Validation(e.to_string())
    }
}

impl From<ControlError> for Failure {
    fn from(e: ControlError) -> Failure {
        Failure::Validation(e.to_string())
    }
}

impl From<PlantError> for Failure {
    fn from(e: PlantError) -> Failure {
        match e {
            PlantError::NotConverged { .. } => Failure::Plant(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<QpError> for Failure {
    fn from(e: QpError) -> Failure {
        match e {
            QpError::IterationLimit(_) => Failure::Solver(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<MiqpError> for Failure {
    fn from(e: MiqpError) -> Failure {
        match e {
            MiqpError::Qp(q) => q.into(),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<ScheduleError> for Failure {
    fn from(e: ScheduleError) -> Failure {
        match e {
            ScheduleError::Miqp(m) => m.into(),
            ScheduleError::Profile(p) => p.into(),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Failure {
        match e {
            SimError::Plant {
                source: PlantError::NotConverged { .. },
                ..
            } => Failure::Plant(e.to_string()),
            SimError::Plant { source, .. } => source.into(),
            SimError::RoundedInfeasible { .. } | SimError::DroopDiverged { .. } => {
                Failure::Solver(e.to_string())
            }
            SimError::Schedule(s) => s.into(),
            SimError::Miqp(m) => m.into(),
            SimError::Qp(q) => q.into(),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

/// Flat key set accepted in `--config` JSON. Every field is optional;
/// defaults fill whatever the file leaves out, and command-line flags win
/// over both.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    horizon: Option<usize>,
    c_loss: Option<f64>,
    c_tap: Option<f64>,
    c_cap: Option<f64>,
    c_delta: Option<f64>,
    reserve_factor: Option<f64>,
    v_lo: Option<f64>,
    v_hi: Option<f64>,
    plan_margin: Option<f64>,
    step_hours: Option<f64>,
    miqp_gap_tol: Option<f64>,
    miqp_integrality_tol: Option<f64>,
    miqp_node_limit: Option<usize>,
    duration_h: Option<f64>,
    upper_period_s: Option<f64>,
    lower_period_s: Option<f64>,
    start_s: Option<f64>,
    gain_fraction: Option<f64>,
    droop_gain: Option<f64>,
    forecast_noise: Option<f64>,
    seed: Option<u64>,
    plant_tol: Option<f64>,
    plant_max_iter: Option<usize>,
}

impl FileConfig {
    fn apply_miqp(&self, m: &mut MiqpConfig) {
        if let Some(v) = self.miqp_gap_tol {
            m.gap_tol = v;
        }
        if let Some(v) = self.miqp_integrality_tol {
            m.integrality_tol = v;
        }
        if let Some(v) = self.miqp_node_limit {
            m.node_limit = v;
        }
    }

    fn rho(&self) -> RhoConfig {
        let mut r = RhoConfig::default();
        self.apply_miqp(&mut r.miqp);
        if let Some(v) = self.horizon {
            r.horizon = v;
        }
        if let Some(v) = self.c_loss {
            r.c_loss = v;
        }
        if let Some(v) = self.c_tap {
            r.c_tap = v;
        }
        if let Some(v) = self.c_cap {
            r.c_cap = v;
        }
        if let Some(v) = self.c_delta {
            r.c_delta = v;
        }
        if self.reserve_factor.is_some() {
            r.reserve_factor = self.reserve_factor;
        }
        if let Some(v) = self.v_lo {
            r.v_lo = v;
        }
        if let Some(v) = self.v_hi {
            r.v_hi = v;
        }
        if let Some(v) = self.plan_margin {
            r.plan_margin = v;
        }
        if let Some(v) = self.step_hours {
            r.step_hours = v;
        }
        r
    }

    fn plant(&self) -> PlantConfig {
        let mut p = PlantConfig::default();
        if let Some(v) = self.plant_tol {
            p.tol = v;
        }
        if let Some(v) = self.plant_max_iter {
            p.max_iter = v;
        }
        p
    }

    fn scenario(&self) -> ScenarioConfig {
        let mut s = ScenarioConfig {
            rho: self.rho(),
            plant: self.plant(),
            ..ScenarioConfig::default()
        };
        if let Some(v) = self.duration_h {
            s.duration_s = v * 3600.0;
        }
        if let Some(v) = self.upper_period_s {
            s.upper_period_s = v;
        }
        if let Some(v) = self.lower_period_s {
            s.lower_period_s = v;
        }
        if let Some(v) = self.start_s {
            s.start_s = v;
        }
        if let Some(v) = self.gain_fraction {
            s.gain_fraction = v;
        }
        if self.droop_gain.is_some() {
            s.droop_gain = self.droop_gain;
        }
        if let Some(v) = self.forecast_noise {
            s.forecast_noise = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        s
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("malformed config {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            e.print().ok();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error[usage]: {}", first_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.class(), flatten(f.message()));
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Validate(a) => cmd_validate(a),
        Cmd::Pf(a) => cmd_pf(a),
        Cmd::Linerr(a) => cmd_linerr(a),
        Cmd::Stability(a) => cmd_stability(a),
        Cmd::Schedule(a) => cmd_schedule(a),
        Cmd::Control(a) => cmd_control(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Miqp(a) => cmd_miqp(a),
    }
}

fn cmd_validate(a: ValidateArgs) -> Result<(), Failure> {
    let (feeder, idx, devices) = load_feeder_indexed(&a.feeder)?;
    println!(
        "ok: {}: {} buses, {} branches, {} bus-phase slots, {} tap controls, {} capacitor phases, {} der slots",
        feeder.name,
        feeder.buses.len(),
        feeder.branches.len(),
        idx.n_bus_phases(),
        devices.tap_controls.len(),
        devices.cap_controls.len(),
        devices.der_slots.len(),
    );
    Ok(())
}

fn cmd_pf(a: PfArgs) -> Result<(), Failure> {
    let (feeder, idx, devices) = load_feeder_indexed(&a.feeder)?;
    let cfg = load_config(a.config.as_ref())?;
    let snap = io::load_snapshot(&a.snapshot)?;
    let inj = snap.to_injections(&feeder, &idx, &devices)?;
    let taps = snap.tap_settings(&devices)?;
    let st = solve_plant(&feeder, &idx, &devices, &inj, &taps, &cfg.plant())?;

    let rows = (0..idx.n_bus_phases()).map(|slot| {
        let (bus, phase) = idx.slot_bus_phase(slot);
        vec![bus.to_string(), phase.to_string(), fmt_sig9(st.v[slot])]
    });
    let csv = csv_string(&["bus", "phase", "v_pu2"], rows);
    emit_table(
        a.out.as_ref(),
        &csv,
        &[
            format!("losses {}", fmt_sig9(st.losses)),
            format!("iterations {}", st.iterations),
            format!("v_min {}", fmt_sig9(st.v.min())),
            format!("v_max {}", fmt_sig9(st.v.max())),
        ],
    )
}

fn cmd_linerr(a: LinerrArgs) -> Result<(), Failure> {
    let (mut tap_step, mut vnom) = (0.00625, 1.0);
    if let Some(path) = &a.feeder {
        let (feeder, _idx, devices) = load_feeder_indexed(path)?;
        let ctrl = devices.tap_controls.first().ok_or_else(|| {
            Failure::Validation("feeder has no regulator; pass --tap-step instead".into())
        })?;
        tap_step = ctrl.spec.tap_step;
        vnom = feeder.vnom;
    }
    if let Some(s) = a.tap_step {
        tap_step = s;
    }
    if let Some(v) = a.vnom {
        vnom = v;
    }
    if !(tap_step > 0.0) {
        return Err(Failure::Validation("tap step must be positive".into()));
    }
    if !(vnom > 0.0) {
        return Err(Failure::Validation("nominal voltage must be positive".into()));
    }

    let mut rows = Vec::new();
    let mut max_err = 0.0f64;
    for n in -16..=16 {
        for i in 0..=24 {
            let v = 0.9409 + 0.005 * i as f64;
            let e = tap_linearization_error(n, v, tap_step, vnom);
            max_err = max_err.max(e.abs());
            rows.push(vec![n.to_string(), fmt_sig9(v), fmt_sig9(e)]);
        }
    }
    let csv = csv_string(&["n", "v", "error_taps"], rows);
    emit_table(
        a.out.as_ref(),
        &csv,
        &[
            format!("max_error_taps {}", fmt_sig9(max_err)),
            format!("rows {}", 33 * 25),
        ],
    )
}

fn cmd_stability(a: StabilityArgs) -> Result<(), Failure> {
    let (feeder, idx, devices) = load_feeder_indexed(&a.feeder)?;
    if devices.der_slots.is_empty() {
        return Err(Failure::Validation("feeder has no DER inverters to bound".into()));
    }
    let sens = SensitivityModel::build(&feeder, &idx, &devices)?;
    let m_ff = der_sensitivity(&feeder, &idx, &devices, &sens.m);
    let bound = stability_bound(&m_ff)?;
    let eigs = m_ff.symmetric_eigenvalues();
    println!("der_slots {}", m_ff.nrows());
    println!("lambda_min {}", fmt_sig9(eigs.min()));
    println!("lambda_max {}", fmt_sig9(eigs.max()));
    println!("stability_bound {}", fmt_sig9(bound));
    println!(
        "contraction_at_0.8 {}",
        fmt_sig9(contraction_factor(&m_ff, 0.8 * bound))
    );
    println!(
        "contraction_at_0.5 {}",
        fmt_sig9(contraction_factor(&m_ff, 0.5 * bound))
    );
    Ok(())
}

fn cmd_schedule(a: ScheduleArgs) -> Result<(), Failure> {
    let (feeder, idx, devices) = load_feeder_indexed(&a.feeder)?;
    let cfg = load_config(a.config.as_ref())?;
    let rho = cfg.rho();
    let profiles = io::load_profiles(&a.profiles)?;
    let fc = forecast_profiles_periodic(
        &feeder,
        &idx,
        &profiles,
        a.at_hour * 3600.0,
        rho.horizon,
        rho.step_hours * 3600.0,
    )?;
    let prior = PriorState::new(&devices);
    let built = build_rho_problem(&feeder, &idx, &devices, &rho, &fc, &prior)?;
    let sol = solve_miqp(&built.miqp, &rho.miqp)?;
    check_solved(&sol, &rho.miqp)?;
    let vars = built.vars;
    let sched = extract_schedule(&sol, &vars, built.warnings);
    for w in &sched.warnings {
        eprintln!("warning: {w}");
    }

    let mut rows = Vec::new();
    for t in 0..vars.horizon {
        for (k, ctrl) in devices.tap_controls.iter().enumerate() {
            rows.push(vec![
                t.to_string(),
                format!("tap:{}", ctrl.branch),
                ctrl.phases.to_string(),
                sched.horizon_taps[t][k].to_string(),
                String::new(),
            ]);
        }
        for (k, ctrl) in devices.cap_controls.iter().enumerate() {
            rows.push(vec![
                t.to_string(),
                format!("cap:{}", ctrl.bus),
                ctrl.phase.to_string(),
                sched.horizon_caps[t][k].to_string(),
                String::new(),
            ]);
        }
        for (j, der) in devices.der_slots.iter().enumerate() {
            rows.push(vec![
                t.to_string(),
                format!("der:{}", der.bus),
                der.phase.to_string(),
                fmt_sig9(sol.values[vars.q_inv(t, j)]),
                String::new(),
            ]);
        }
        for slot in 0..vars.nbp {
            let (bus, phase) = idx.slot_bus_phase(slot);
            rows.push(vec![
                t.to_string(),
                format!("bus:{bus}"),
                phase.to_string(),
                String::new(),
                fmt_sig9(sol.values[vars.v(t, slot)]),
            ]);
        }
    }
    let csv = csv_string(&["t", "device", "phase", "setting", "nu"], rows);
    emit_table(
        a.out.as_ref(),
        &csv,
        &[
            format!("status {}", status_name(sched.status)),
            format!("objective {}", fmt_sig9(sched.objective)),
            format!("nodes {}", sched.nodes_explored),
            format!("taps {}", join_ints(&sched.taps)),
            format!("caps {}", join_ints(&sched.cap_steps)),
            format!("delta_max {}", fmt_sig9(sched.delta.amax())),
        ],
    )
}

fn cmd_control(a: ControlArgs) -> Result<(), Failure> {
    let (feeder, idx, devices) = load_feeder_indexed(&a.feeder)?;
    if devices.der_slots.is_empty() {
        return Err(Failure::Validation("feeder has no DER inverters to steer".into()));
    }
    let cfg = load_config(a.config.as_ref())?;
    let mut rho = cfg.rho();
    rho.horizon = 1;
    let profiles = io::load_profiles(&a.profiles)?;
    let inj = instantaneous_injections(&feeder, &idx, &profiles, a.at_s)?;

    // One single-step schedule pins the discrete devices and the reference.
    let mut fc = ForecastSet::zeros(idx.n_bus_phases(), 1);
    fc.p_c[0] = inj.p_c.clone();
    fc.q_c[0] = inj.q_c.clone();
    fc.p_inv[0] = inj.p_inv.clone();
    let prior = PriorState::new(&devices);
    let built = build_rho_problem(&feeder, &idx, &devices, &rho, &fc, &prior)?;
    let sol = solve_miqp(&built.miqp, &rho.miqp)?;
    check_solved(&sol, &rho.miqp)?;
    let sched = extract_schedule(&sol, &built.vars, built.warnings);

    let (plan_lo, plan_hi) = rho.planning_window();
    let vref_full = project_reference(&sched.nu, plan_lo, plan_hi);
    let vref = DVector::from_iterator(
        devices.der_slots.len(),
        devices
            .der_slots
            .iter()
            .map(|d| vref_full[idx.bus_phase_slot(&feeder, d.bus, d.phase).unwrap()]),
    );

    let tcfg = TrackingConfig {
        gain_fraction: cfg.gain_fraction.unwrap_or(0.8),
        plant: cfg.plant(),
        ..TrackingConfig::default()
    };
    let out = static_tracking_experiment(
        &feeder,
        &idx,
        &devices,
        &inj,
        &sched.taps,
        &sched.cap_steps,
        &vref,
        &tcfg,
    )?;

    let mut rows = Vec::new();
    for (i, e2) in out.integral_trace.iter().enumerate() {
        rows.push(vec!["integral".into(), i.to_string(), fmt_sig9(*e2)]);
    }
    for (i, e2) in out.droop_trace.iter().enumerate() {
        rows.push(vec!["droop".into(), i.to_string(), fmt_sig9(*e2)]);
    }
    rows.push(vec![
        "open_loop".into(),
        "0".into(),
        fmt_sig9(out.open_loop_error.powi(2)),
    ]);
    let csv = csv_string(&["method", "iter", "err2"], rows);
    emit_table(
        a.out.as_ref(),
        &csv,
        &[
            format!("taps {}", join_ints(&sched.taps)),
            format!("caps {}", join_ints(&sched.cap_steps)),
            format!("stability_bound {}", fmt_sig9(out.stability_bound)),
            format!("integral_gain {}", fmt_sig9(out.integral_gain)),
            format!("integral_err2 {}", fmt_sig9(out.integral_error.powi(2))),
            format!("integral_iters {}", out.integral_iters),
            format!("droop_gain {}", fmt_sig9(out.droop_gain)),
            format!("droop_err2 {}", fmt_sig9(out.droop_error.powi(2))),
            format!("droop_attempts {}", out.droop_attempts),
            format!("open_loop_err2 {}", fmt_sig9(out.open_loop_error.powi(2))),
        ],
    )
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Failure> {
    let mode = ControlMode::parse(&a.mode).ok_or_else(|| {
        Failure::Usage(format!(
            "unknown mode {:?}; expected no_control, upper_only, two_layer, two_layer_droop or rounded_relaxation_upper",
            a.mode
        ))
    })?;
    let (feeder, idx, devices) = load_feeder_indexed(&a.feeder)?;
    let cfg = load_config(a.config.as_ref())?;
    let profiles = io::load_profiles(&a.profiles)?;

    let mut sc = cfg.scenario();
    sc.mode = mode;
    if let Some(v) = a.duration_h {
        sc.duration_s = v * 3600.0;
    }
    if let Some(v) = a.upper_period_s {
        sc.upper_period_s = v;
    }
    if let Some(v) = a.lower_period_s {
        sc.lower_period_s = v;
    }
    if let Some(v) = a.start_s {
        sc.start_s = v;
    }
    if let Some(v) = a.gain_fraction {
        sc.gain_fraction = v;
    }
    if let Some(v) = a.droop_gain {
        sc.droop_gain = Some(v);
    }
    if let Some(v) = a.forecast_noise {
        sc.forecast_noise = v;
    }
    if let Some(v) = a.seed {
        sc.seed = v;
    }
    if let Ok(s) = std::env::var("VVL_SEED") {
        sc.seed = s
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("VVL_SEED must be an unsigned integer, got {s:?}")))?;
    }

    let result = run_scenario(&feeder, &profiles, &sc)?;
    let summary = write_results(&a.out, &idx, &devices, &sc, &result)?;
    print!("{summary}");
    Ok(())
}

fn cmd_miqp(a: MiqpArgs) -> Result<(), Failure> {
    let cfg = load_config(a.config.as_ref())?;

    if let Some(dump_path) = &a.dump {
        let feeder_path = a.feeder.as_ref().expect("clap enforces --feeder with --dump");
        let profile_dir = a.profiles.as_ref().expect("clap enforces --profiles with --dump");
        let (feeder, idx, devices) = load_feeder_indexed(feeder_path)?;
        let rho = cfg.rho();
        let profiles = io::load_profiles(profile_dir)?;
        let fc = forecast_profiles_periodic(
            &feeder,
            &idx,
            &profiles,
            a.at_hour * 3600.0,
            rho.horizon,
            rho.step_hours * 3600.0,
        )?;
        let prior = PriorState::new(&devices);
        let built = build_rho_problem(&feeder, &idx, &devices, &rho, &fc, &prior)?;
        for w in &built.warnings {
            eprintln!("warning: {w}");
        }
        let dump = MiqpDump {
            problem: built.miqp,
            config: rho.miqp,
        };
        let mut text = serde_json::to_string_pretty(&dump).expect("dump serializes");
        text.push('\n');
        fs::write(dump_path, text)
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", dump_path.display())))?;
        println!("n_vars {}", dump.problem.qp.n);
        println!("integers {}", dump.problem.integers.len());
        println!("eq_rows {}", dump.problem.qp.b_eq.len());
        println!("in_rows {}", dump.problem.qp.b_in.len());
        return Ok(());
    }

    let solve_path = a.solve.as_ref().expect("clap enforces --dump or --solve");
    let text = fs::read_to_string(solve_path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", solve_path.display())))?;
    let dump: MiqpDump = serde_json::from_str(&text).map_err(|e| {
        Failure::Validation(format!("malformed problem file {}: {e}", solve_path.display()))
    })?;
    let mut mcfg = dump.config;
    cfg.apply_miqp(&mut mcfg);
    let sol = solve_miqp(&dump.problem, &mcfg)?;
    if let Some(out) = &a.out {
        let rows = sol
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| vec![i.to_string(), fmt_sig9(*x)]);
        let csv = csv_string(&["index", "value"], rows);
        fs::write(out, csv)
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", out.display())))?;
    }
    println!("status {}", status_name(sol.status));
    println!("objective {}", fmt_sig9(sol.objective));
    println!("bound {}", fmt_sig9(sol.bound));
    println!("nodes {}", sol.nodes_explored);
    if sol.status == MiqpStatus::NodeLimit {
        return Err(Failure::Solver(format!(
            "node limit {} hit before optimality; raise miqp_node_limit",
            mcfg.node_limit
        )));
    }
    Ok(())
}

/// On-disk form of one scheduling MIQP: the problem plus the solver knobs in
/// force when it was built.
#[derive(Serialize, Deserialize)]
struct MiqpDump {
    problem: MiqpProblem,
    config: MiqpConfig,
}

/// Writes the detail CSVs plus `summary.txt` into `dir` and returns the
/// summary text. Aggregates are recomputed from the rounded strings that
/// went into the CSVs, so re-adding the files reproduces the summary
/// exactly.
fn write_results(
    dir: &Path,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    sc: &ScenarioConfig,
    result: &SimResult,
) -> Result<String, Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    let write = |name: &str, text: &str| -> Result<(), Failure> {
        let path = dir.join(name);
        fs::write(&path, text)
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
    };

    let mut vcsv = String::from("t_s,bus,phase,v_pu2\n");
    let (mut v_min, mut v_max) = (f64::NAN, f64::NAN);
    let mut violation_ticks = 0usize;
    let mut violation_slots = 0usize;
    for rec in &result.records {
        let t = fmt_sig9(rec.t_s);
        let mut bad = 0usize;
        for slot in 0..idx.n_bus_phases() {
            let (bus, phase) = idx.slot_bus_phase(slot);
            let field = fmt_sig9(rec.v[slot]);
            let v: f64 = field.parse().expect("sig9 strings parse back");
            if v < sc.rho.v_lo || v > sc.rho.v_hi {
                bad += 1;
            }
            v_min = if v_min.is_nan() { v } else { v_min.min(v) };
            v_max = if v_max.is_nan() { v } else { v_max.max(v) };
            writeln!(vcsv, "{t},{bus},{phase},{field}").unwrap();
        }
        violation_slots += bad;
        violation_ticks += usize::from(bad > 0);
    }

    let mut lcsv = String::from("t_s,losses\n");
    let mut energy = 0.0f64;
    for rec in &result.records {
        let field = fmt_sig9(rec.losses);
        energy += field.parse::<f64>().expect("sig9 strings parse back") * sc.lower_period_s
            / 3600.0;
        writeln!(lcsv, "{},{field}", fmt_sig9(rec.t_s)).unwrap();
    }

    let mut qcsv = String::from("t_s,bus,phase,q_inv\n");
    for rec in &result.records {
        let t = fmt_sig9(rec.t_s);
        for (j, der) in devices.der_slots.iter().enumerate() {
            writeln!(qcsv, "{t},{},{},{}", der.bus, der.phase, fmt_sig9(rec.q_inv[j])).unwrap();
        }
    }

    // Device positions only at upper-layer boundaries; they are constant in
    // between, so the down-sampled table is lossless.
    let mut dcsv = String::from("t_s,device,phase,setting\n");
    let ticks_per_upper = (sc.upper_period_s / sc.lower_period_s).round().max(1.0) as usize;
    let mut tap_moves = 0u64;
    let mut cap_moves = 0u64;
    let mut prev_taps = vec![0i32; devices.tap_controls.len()];
    let mut prev_caps = vec![0u32; devices.cap_controls.len()];
    for (k, rec) in result.records.iter().enumerate() {
        if k % ticks_per_upper != 0 {
            continue;
        }
        let t = fmt_sig9(rec.t_s);
        for (i, ctrl) in devices.tap_controls.iter().enumerate() {
            writeln!(dcsv, "{t},tap:{},{},{}", ctrl.branch, ctrl.phases, rec.taps[i]).unwrap();
            tap_moves += rec.taps[i].abs_diff(prev_taps[i]) as u64;
        }
        for (i, ctrl) in devices.cap_controls.iter().enumerate() {
            writeln!(dcsv, "{t},cap:{},{},{}", ctrl.bus, ctrl.phase, rec.cap_steps[i]).unwrap();
            cap_moves += rec.cap_steps[i].abs_diff(prev_caps[i]) as u64;
        }
        prev_taps.copy_from_slice(&rec.taps);
        prev_caps.copy_from_slice(&rec.cap_steps);
    }

    let mut s = String::new();
    writeln!(s, "mode {}", sc.mode.name()).unwrap();
    writeln!(s, "ticks {}", result.records.len()).unwrap();
    writeln!(s, "lower_period_s {}", fmt_sig9(sc.lower_period_s)).unwrap();
    writeln!(s, "upper_period_s {}", fmt_sig9(sc.upper_period_s)).unwrap();
    writeln!(s, "schedules {}", result.schedules.len()).unwrap();
    writeln!(s, "violation_ticks {violation_ticks}").unwrap();
    writeln!(s, "violation_slots {violation_slots}").unwrap();
    writeln!(s, "energy_loss_puh {}", fmt_sig9(energy)).unwrap();
    writeln!(s, "v_min {}", fmt_sig9(v_min)).unwrap();
    writeln!(s, "v_max {}", fmt_sig9(v_max)).unwrap();
    writeln!(s, "tap_moves {tap_moves}").unwrap();
    writeln!(s, "cap_moves {cap_moves}").unwrap();
    writeln!(s, "stability_bound {}", fmt_sig9(result.stability_bound)).unwrap();
    writeln!(s, "gain {}", fmt_sig9(result.gain)).unwrap();

    write("voltages.csv", &vcsv)?;
    write("losses.csv", &lcsv)?;
    write("qinv.csv", &qcsv)?;
    write("devices.csv", &dcsv)?;
    write("summary.txt", &s)?;
    Ok(s)
}

fn load_feeder_indexed(path: &Path) -> Result<(Feeder, FeederIndex, DeviceIndex), Failure> {
    let feeder = io::load_feeder(path)?;
    let idx = FeederIndex::new(&feeder)?;
    let devices = DeviceIndex::new(&feeder);
    Ok((feeder, idx, devices))
}

fn check_solved(sol: &MiqpSolution, cfg: &MiqpConfig) -> Result<(), Failure> {
    match sol.status {
        MiqpStatus::Optimal | MiqpStatus::GapLimit => Ok(()),
        MiqpStatus::NodeLimit => Err(Failure::Solver(format!(
            "node limit {} hit before optimality; raise miqp_node_limit",
            cfg.node_limit
        ))),
        MiqpStatus::Infeasible => Err(Failure::Validation(
            "scheduling problem infeasible despite slack; feeder data is inconsistent".into(),
        )),
    }
}

fn status_name(status: MiqpStatus) -> &'static str {
    match status {
        MiqpStatus::Optimal => "optimal",
        MiqpStatus::GapLimit => "gap_limit",
        MiqpStatus::NodeLimit => "node_limit",
        MiqpStatus::Infeasible => "infeasible",
    }
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// CSV to `--out` with the summary on stdout, or bare CSV on stdout.
fn emit_table(out: Option<&PathBuf>, csv: &str, summary: &[String]) -> Result<(), Failure> {
    match out {
        Some(path) => {
            fs::write(path, csv)
                .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
            for line in summary {
                println!("{line}");
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn join_ints<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn first_line(text: &str) -> String {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    line.strip_prefix("error: ").unwrap_or(line).to_string()
}

fn flatten(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

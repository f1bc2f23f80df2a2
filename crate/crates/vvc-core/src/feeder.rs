//! Feeder data model: buses, branches, devices, validation, and the
//! phase-expanded incidence structure used by both flow models.
//!
//! Buses are numbered so that every branch goes from a lower id (parent) to a
//! higher id (child) with bus 0 as the slack; with branches ordered by child
//! bus the phase-expanded incidence block `A` is upper triangular with −1 on
//! the diagonal, so its invertibility is structural rather than numerical.

use crate::phase::{Phase, PhaseSet};
use nalgebra::DMatrix;
use num_complex::Complex64;

/// On-load tap changer or step voltage regulator attached to a branch.
///
/// The ratio `t = 1 + n·tap_step` applies to the from-side voltage; the
/// branch impedance carries the secondary-side current.
#[derive(Clone, Debug, PartialEq)]
pub struct RegulatorSpec {
    pub tap_min: i32,
    pub tap_max: i32,
    pub tap_step: f64,
    /// Max |tap movement| per scheduling step.
    pub per_step_limit: u32,
    /// Max total tap movement per rolling day.
    pub daily_limit: u32,
    /// Ganged regulators move all phases with a single command.
    pub ganged: bool,
}

/// Switched capacitor bank; each covered phase carries its own step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct CapacitorBankSpec {
    pub phases: PhaseSet,
    /// Reactive injection per step per phase, in pu at nominal voltage.
    pub step_q: f64,
    pub max_steps: u32,
    pub per_step_limit: u32,
    pub daily_limit: u32,
}

/// DER inverter; `reserve_factor` shrinks the scheduler's view of the VAR
/// capability so the real-time layer keeps headroom.
#[derive(Clone, Debug, PartialEq)]
pub struct DerInverterSpec {
    pub phases: PhaseSet,
    /// Apparent power rating per phase, pu.
    pub s_inv: f64,
    pub reserve_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub phases: PhaseSet,
    pub capacitor: Option<CapacitorBankSpec>,
    pub der: Option<DerInverterSpec>,
    /// Profile reference scaling `load_p`/`load_q` over time; None = constant zero load.
    pub load_profile: Option<String>,
    pub der_profile: Option<String>,
    /// Base load per phase (multiplied by the load profile), aligned with `phases`.
    pub load_p: Vec<f64>,
    pub load_q: Vec<f64>,
    /// DER active output per phase at profile value 1, aligned with `phases`.
    pub der_p: Vec<f64>,
}

impl Bus {
    pub fn new(id: usize, phases: PhaseSet) -> Bus {
        let n = phases.len();
        Bus {
            id,
            phases,
            capacitor: None,
            der: None,
            load_profile: None,
            der_profile: None,
            load_p: vec![0.0; n],
            load_q: vec![0.0; n],
            der_p: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub phases: PhaseSet,
    /// Series impedance, |phases| × |phases| complex matrix in pu.
    pub z: DMatrix<Complex64>,
    pub regulator: Option<RegulatorSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Feeder {
    pub name: String,
    /// Sorted by id; buses[0] is the slack.
    pub buses: Vec<Bus>,
    /// Sorted by to_bus.
    pub branches: Vec<Branch>,
    /// Squared slack voltage per slack phase, pu².
    pub v0: Vec<f64>,
    /// Nominal squared voltage, pu².
    pub vnom: f64,
    pub power_base_mva: f64,
}

impl Feeder {
    /// Builds a feeder, canonicalizing bus and branch order.
    pub fn new(
        name: impl Into<String>,
        mut buses: Vec<Bus>,
        mut branches: Vec<Branch>,
        v0: Vec<f64>,
        vnom: f64,
        power_base_mva: f64,
    ) -> Feeder {
        buses.sort_by_key(|b| b.id);
        branches.sort_by_key(|b| b.to_bus);
        Feeder {
            name: name.into(),
            buses,
            branches,
            v0,
            vnom,
            power_base_mva,
        }
    }

    pub fn bus(&self, id: usize) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn slack(&self) -> &Bus {
        &self.buses[0]
    }

    pub fn validate(&self) -> ValidationReport {
        validate_feeder(self)
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("feeder has no buses")]
    NoBuses,
    #[error("bus ids must be unique and include 0 as the slack (found duplicate or missing id {0})")]
    BadBusIds(usize),
    #[error("radiality: expected {expected} branches for {buses} buses, found {found}")]
    BranchCount {
        buses: usize,
        expected: usize,
        found: usize,
    },
    #[error("radiality: bus {0} must have exactly one incoming branch, found {1}")]
    ParentCount(usize, usize),
    #[error("branch {from}->{to}: endpoint bus does not exist")]
    DanglingBranch { from: usize, to: usize },
    #[error("branch {from}->{to}: parent id must be smaller than child id (number buses so parents precede children)")]
    NotTopological { from: usize, to: usize },
    #[error("branch {from}->{to}: phases {branch} not a subset of bus {bus} phases {bus_phases}")]
    BranchPhasesNotInBus {
        from: usize,
        to: usize,
        branch: PhaseSet,
        bus: usize,
        bus_phases: PhaseSet,
    },
    #[error("bus {bus}: phases {bus_phases} not a subset of its supply branch phases {branch}")]
    ChildPhasesNotInBranch {
        bus: usize,
        bus_phases: PhaseSet,
        branch: PhaseSet,
    },
    #[error("branch {from}->{to}: impedance matrix is {rows}x{cols}, expected {dim}x{dim}")]
    ZDimension {
        from: usize,
        to: usize,
        rows: usize,
        cols: usize,
        dim: usize,
    },
    #[error("branch {from}->{to}: diagonal impedance entry {entry} must have positive resistance and reactance")]
    ZDiagonal { from: usize, to: usize, entry: usize },
    #[error("branch {from}->{to}: regulator spec invalid ({reason})")]
    BadRegulator {
        from: usize,
        to: usize,
        reason: String,
    },
    #[error("bus {bus}: capacitor spec invalid ({reason})")]
    BadCapacitor { bus: usize, reason: String },
    #[error("bus {bus}: DER spec invalid ({reason})")]
    BadDer { bus: usize, reason: String },
    #[error("bus {bus}: device phases {device} not a subset of bus phases {bus_phases}")]
    DevicePhases {
        bus: usize,
        device: PhaseSet,
        bus_phases: PhaseSet,
    },
    #[error("bus {bus}: {field} has {found} entries, expected one per phase ({expected})")]
    BadPerPhaseVector {
        bus: usize,
        field: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("slack v0 has {found} entries, expected {expected}; all must be positive")]
    BadSlackVoltage { found: usize, expected: usize },
    #[error("vnom and power base must be positive")]
    BadBaseQuantities,
    #[error("bus {bus}: {field} profile reference is empty")]
    EmptyProfileRef { bus: usize, field: &'static str },
    #[error("bus {bus}: DER profile given but no inverter spec")]
    DerProfileWithoutInverter { bus: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<(), FeederError> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(FeederError::Invalid(self))
        }
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FeederError {
    #[error("feeder validation failed:\n{0}")]
    Invalid(ValidationReport),
}

/// Checks every structural invariant the rest of the crate relies on.
/// An empty report means the feeder is usable by every other module.
pub fn validate_feeder(feeder: &Feeder) -> ValidationReport {
    let mut violations = Vec::new();

    if feeder.buses.is_empty() {
        violations.push(Violation::NoBuses);
        return ValidationReport { violations };
    }

    // Bus ids must be exactly 0..n after canonical sorting.
    for (i, bus) in feeder.buses.iter().enumerate() {
        if bus.id != i {
            violations.push(Violation::BadBusIds(bus.id));
            return ValidationReport { violations };
        }
    }

    let n_buses = feeder.buses.len();
    if feeder.branches.len() != n_buses - 1 {
        violations.push(Violation::BranchCount {
            buses: n_buses,
            expected: n_buses - 1,
            found: feeder.branches.len(),
        });
    }

    // Exactly one parent per non-slack bus, none for the slack.
    for bus in &feeder.buses {
        let parents = feeder
            .branches
            .iter()
            .filter(|br| br.to_bus == bus.id)
            .count();
        let expected = usize::from(bus.id != 0);
        if parents != expected {
            violations.push(Violation::ParentCount(bus.id, parents));
        }
    }

    for br in &feeder.branches {
        let (from, to) = (br.from_bus, br.to_bus);
        let from_bus = feeder.bus(from);
        let to_bus = feeder.bus(to);
        if from_bus.is_none() || to_bus.is_none() {
            violations.push(Violation::DanglingBranch { from, to });
            continue;
        }
        let (from_bus, to_bus) = (from_bus.unwrap(), to_bus.unwrap());
        if from >= to {
            violations.push(Violation::NotTopological { from, to });
        }
        for (bus, phases) in [(from_bus, from_bus.phases), (to_bus, to_bus.phases)] {
            if !br.phases.is_subset_of(phases) {
                violations.push(Violation::BranchPhasesNotInBus {
                    from,
                    to,
                    branch: br.phases,
                    bus: bus.id,
                    bus_phases: phases,
                });
            }
        }
        if !to_bus.phases.is_subset_of(br.phases) {
            violations.push(Violation::ChildPhasesNotInBranch {
                bus: to,
                bus_phases: to_bus.phases,
                branch: br.phases,
            });
        }
        let dim = br.phases.len();
        if br.z.nrows() != dim || br.z.ncols() != dim {
            violations.push(Violation::ZDimension {
                from,
                to,
                rows: br.z.nrows(),
                cols: br.z.ncols(),
                dim,
            });
        } else {
            for k in 0..dim {
                let zkk = br.z[(k, k)];
                if !(zkk.re > 0.0 && zkk.im > 0.0) {
                    violations.push(Violation::ZDiagonal {
                        from,
                        to,
                        entry: k,
                    });
                }
            }
        }
        if let Some(reg) = &br.regulator {
            let mut reasons = Vec::new();
            if !(reg.tap_min <= 0 && 0 <= reg.tap_max && reg.tap_min < reg.tap_max) {
                reasons.push("tap range must straddle zero");
            }
            if !(reg.tap_step > 0.0) {
                reasons.push("tap_step must be positive");
            }
            if reg.per_step_limit == 0 {
                reasons.push("per_step_limit must be at least 1");
            }
            if reg.daily_limit < reg.per_step_limit {
                reasons.push("daily_limit must be >= per_step_limit");
            }
            if !reasons.is_empty() {
                violations.push(Violation::BadRegulator {
                    from,
                    to,
                    reason: reasons.join("; "),
                });
            }
        }
    }

    for bus in &feeder.buses {
        let np = bus.phases.len();
        for (field, len) in [
            ("load_p", bus.load_p.len()),
            ("load_q", bus.load_q.len()),
            ("der_p", bus.der_p.len()),
        ] {
            if len != np {
                violations.push(Violation::BadPerPhaseVector {
                    bus: bus.id,
                    field,
                    found: len,
                    expected: np,
                });
            }
        }
        if let Some(cap) = &bus.capacitor {
            if !cap.phases.is_subset_of(bus.phases) {
                violations.push(Violation::DevicePhases {
                    bus: bus.id,
                    device: cap.phases,
                    bus_phases: bus.phases,
                });
            }
            let mut reasons = Vec::new();
            if !(cap.step_q > 0.0) {
                reasons.push("step_q must be positive");
            }
            if cap.per_step_limit == 0 || cap.daily_limit == 0 {
                reasons.push("switching limits must be positive");
            }
            if !reasons.is_empty() {
                violations.push(Violation::BadCapacitor {
                    bus: bus.id,
                    reason: reasons.join("; "),
                });
            }
        }
        if let Some(der) = &bus.der {
            if !der.phases.is_subset_of(bus.phases) {
                violations.push(Violation::DevicePhases {
                    bus: bus.id,
                    device: der.phases,
                    bus_phases: bus.phases,
                });
            }
            let mut reasons = Vec::new();
            if !(der.s_inv > 0.0) {
                reasons.push("s_inv must be positive");
            }
            if !(der.reserve_factor > 0.0 && der.reserve_factor < 1.0) {
                reasons.push("reserve_factor must lie in (0, 1)");
            }
            if !reasons.is_empty() {
                violations.push(Violation::BadDer {
                    bus: bus.id,
                    reason: reasons.join("; "),
                });
            }
        }
        for (field, re) in [
            ("load", bus.load_profile.as_deref()),
            ("der", bus.der_profile.as_deref()),
        ] {
            if let Some(r) = re {
                if r.is_empty() {
                    violations.push(Violation::EmptyProfileRef { bus: bus.id, field });
                }
            }
        }
        if bus.der_profile.is_some() && bus.der.is_none() {
            violations.push(Violation::DerProfileWithoutInverter { bus: bus.id });
        }
    }

    let slack = &feeder.buses[0];
    if feeder.v0.len() != slack.phases.len() || feeder.v0.iter().any(|v| !(*v > 0.0)) {
        violations.push(Violation::BadSlackVoltage {
            found: feeder.v0.len(),
            expected: slack.phases.len(),
        });
    }
    if !(feeder.vnom > 0.0 && feeder.power_base_mva > 0.0) {
        violations.push(Violation::BadBaseQuantities);
    }

    ValidationReport { violations }
}

/// Flat slot numbering for bus-phases (non-slack) and branch-phases, plus
/// tree adjacency. Slots are ordered by bus id / branch child id, then phase;
/// the two slot families have equal length on a valid feeder.
#[derive(Clone, Debug)]
pub struct FeederIndex {
    bus_phase: Vec<(usize, Phase)>,
    bus_offset: Vec<usize>,
    branch_phase: Vec<(usize, Phase)>,
    branch_offset: Vec<usize>,
    /// Branch indices with from_bus == bus id.
    children: Vec<Vec<usize>>,
    /// Branch index feeding each bus (None for the slack).
    parent_branch: Vec<Option<usize>>,
}

impl FeederIndex {
    pub fn new(feeder: &Feeder) -> Result<FeederIndex, FeederError> {
        feeder.validate().into_result()?;
        let mut bus_phase = Vec::new();
        let mut bus_offset = Vec::with_capacity(feeder.buses.len());
        for bus in &feeder.buses {
            bus_offset.push(bus_phase.len());
            if bus.id == 0 {
                continue;
            }
            for p in bus.phases.iter() {
                bus_phase.push((bus.id, p));
            }
        }
        let mut branch_phase = Vec::new();
        let mut branch_offset = Vec::with_capacity(feeder.branches.len());
        let mut children = vec![Vec::new(); feeder.buses.len()];
        let mut parent_branch = vec![None; feeder.buses.len()];
        for (k, br) in feeder.branches.iter().enumerate() {
            branch_offset.push(branch_phase.len());
            for p in br.phases.iter() {
                branch_phase.push((k, p));
            }
            children[br.from_bus].push(k);
            parent_branch[br.to_bus] = Some(k);
        }
        Ok(FeederIndex {
            bus_phase,
            bus_offset,
            branch_phase,
            branch_offset,
            children,
            parent_branch,
        })
    }

    pub fn n_bus_phases(&self) -> usize {
        self.bus_phase.len()
    }

    pub fn n_branch_phases(&self) -> usize {
        self.branch_phase.len()
    }

    pub fn bus_phase_slot(&self, feeder: &Feeder, bus: usize, p: Phase) -> Option<usize> {
        if bus == 0 || bus >= feeder.buses.len() {
            return None;
        }
        let pos = feeder.buses[bus].phases.position(p)?;
        // bus_offset already skips the slack's (empty) contribution.
        Some(self.bus_offset[bus] + pos)
    }

    pub fn slot_bus_phase(&self, slot: usize) -> (usize, Phase) {
        self.bus_phase[slot]
    }

    pub fn branch_phase_slot(&self, feeder: &Feeder, branch: usize, p: Phase) -> Option<usize> {
        let pos = feeder.branches.get(branch)?.phases.position(p)?;
        Some(self.branch_offset[branch] + pos)
    }

    pub fn slot_branch_phase(&self, slot: usize) -> (usize, Phase) {
        self.branch_phase[slot]
    }

    pub fn branch_slots(&self, branch: usize) -> std::ops::Range<usize> {
        let start = self.branch_offset[branch];
        let end = if branch + 1 < self.branch_offset.len() {
            self.branch_offset[branch + 1]
        } else {
            self.branch_phase.len()
        };
        start..end
    }

    pub fn child_branches(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    pub fn parent_branch(&self, bus: usize) -> Option<usize> {
        self.parent_branch[bus]
    }
}

/// Phase-expanded incidence matrices. `a` (non-slack rows) is square, upper
/// triangular with −1 diagonal: +1 at the parent bus-phase, −1 at the child.
#[derive(Clone, Debug)]
pub struct IncidenceMatrices {
    /// Single-phase bus×branch incidence, slack row included.
    pub g_bar: DMatrix<f64>,
    /// Phase-expanded incidence, all bus-phase rows (slack first).
    pub a_bar: DMatrix<f64>,
    /// Slack rows of `a_bar`.
    pub a0: DMatrix<f64>,
    /// Non-slack rows of `a_bar`.
    pub a: DMatrix<f64>,
}

pub fn build_incidence(feeder: &Feeder, idx: &FeederIndex) -> Result<IncidenceMatrices, FeederError> {
    feeder.validate().into_result()?;
    let n_buses = feeder.buses.len();
    let n_branches = feeder.branches.len();
    let mut g_bar = DMatrix::zeros(n_buses, n_branches);
    for (k, br) in feeder.branches.iter().enumerate() {
        g_bar[(br.from_bus, k)] = 1.0;
        g_bar[(br.to_bus, k)] = -1.0;
    }

    let slack_phases = feeder.buses[0].phases;
    let n_slack = slack_phases.len();
    let nbp = idx.n_bus_phases();
    let nfp = idx.n_branch_phases();
    let mut a_bar = DMatrix::zeros(n_slack + nbp, nfp);
    for (k, br) in feeder.branches.iter().enumerate() {
        for p in br.phases.iter() {
            let col = idx.branch_phase_slot(feeder, k, p).unwrap();
            // Child row: branch phases equal the child's phase set on a valid feeder.
            let child_row = n_slack + idx.bus_phase_slot(feeder, br.to_bus, p).unwrap();
            a_bar[(child_row, col)] = -1.0;
            if br.from_bus == 0 {
                if let Some(pos) = slack_phases.position(p) {
                    a_bar[(pos, col)] = 1.0;
                }
            } else if let Some(slot) = idx.bus_phase_slot(feeder, br.from_bus, p) {
                a_bar[(n_slack + slot, col)] = 1.0;
            }
        }
    }
    let a0 = a_bar.rows(0, n_slack).into_owned();
    let a = a_bar.rows(n_slack, nbp).into_owned();
    debug_assert_eq!(a.nrows(), a.ncols());
    Ok(IncidenceMatrices { g_bar, a_bar, a0, a })
}

/// One schedulable tap command: a ganged regulator yields a single control
/// covering all branch phases, a per-phase regulator yields one per phase.
#[derive(Clone, Debug)]
pub struct TapControl {
    pub branch: usize,
    pub phases: PhaseSet,
    pub spec: RegulatorSpec,
}

/// One capacitor phase (banks switch per phase).
#[derive(Clone, Debug)]
pub struct CapControl {
    pub bus: usize,
    pub phase: Phase,
    pub spec: CapacitorBankSpec,
}

/// One DER inverter phase.
#[derive(Clone, Debug)]
pub struct DerSlot {
    pub bus: usize,
    pub phase: Phase,
    pub s_inv: f64,
    pub reserve_factor: f64,
}

/// Deterministic enumeration of controllable devices.
#[derive(Clone, Debug)]
pub struct DeviceIndex {
    pub tap_controls: Vec<TapControl>,
    pub cap_controls: Vec<CapControl>,
    pub der_slots: Vec<DerSlot>,
}

impl DeviceIndex {
    pub fn new(feeder: &Feeder) -> DeviceIndex {
        let mut tap_controls = Vec::new();
        for (k, br) in feeder.branches.iter().enumerate() {
            if let Some(reg) = &br.regulator {
                if reg.ganged {
                    tap_controls.push(TapControl {
                        branch: k,
                        phases: br.phases,
                        spec: reg.clone(),
                    });
                } else {
                    for p in br.phases.iter() {
                        tap_controls.push(TapControl {
                            branch: k,
                            phases: PhaseSet::single(p),
                            spec: reg.clone(),
                        });
                    }
                }
            }
        }
        let mut cap_controls = Vec::new();
        let mut der_slots = Vec::new();
        for bus in &feeder.buses {
            if let Some(cap) = &bus.capacitor {
                for p in cap.phases.iter() {
                    cap_controls.push(CapControl {
                        bus: bus.id,
                        phase: p,
                        spec: cap.clone(),
                    });
                }
            }
            if let Some(der) = &bus.der {
                for p in der.phases.iter() {
                    der_slots.push(DerSlot {
                        bus: bus.id,
                        phase: p,
                        s_inv: der.s_inv,
                        reserve_factor: der.reserve_factor,
                    });
                }
            }
        }
        DeviceIndex {
            tap_controls,
            cap_controls,
            der_slots,
        }
    }

    /// Expands per-control tap positions to branch-phase slots (0 elsewhere).
    pub fn taps_to_branch_phase(
        &self,
        feeder: &Feeder,
        idx: &FeederIndex,
        taps: &[i32],
    ) -> Vec<i32> {
        assert_eq!(taps.len(), self.tap_controls.len());
        let mut out = vec![0i32; idx.n_branch_phases()];
        for (ctrl, &n) in self.tap_controls.iter().zip(taps) {
            for p in ctrl.phases.iter() {
                let slot = idx.branch_phase_slot(feeder, ctrl.branch, p).unwrap();
                out[slot] = n;
            }
        }
        out
    }

    /// Capacitor injection per bus-phase slot from per-control step counts.
    pub fn caps_to_q(&self, feeder: &Feeder, idx: &FeederIndex, steps: &[u32]) -> Vec<f64> {
        assert_eq!(steps.len(), self.cap_controls.len());
        let mut out = vec![0.0; idx.n_bus_phases()];
        for (ctrl, &n) in self.cap_controls.iter().zip(steps) {
            let slot = idx.bus_phase_slot(feeder, ctrl.bus, ctrl.phase).unwrap();
            out[slot] += ctrl.spec.step_q * n as f64;
        }
        out
    }

    /// Scatters per-DER-slot values into a full bus-phase vector.
    pub fn der_to_bus_phase(
        &self,
        feeder: &Feeder,
        idx: &FeederIndex,
        q_der: &[f64],
    ) -> Vec<f64> {
        assert_eq!(q_der.len(), self.der_slots.len());
        let mut out = vec![0.0; idx.n_bus_phases()];
        for (slot, &q) in self.der_slots.iter().zip(q_der) {
            let s = idx.bus_phase_slot(feeder, slot.bus, slot.phase).unwrap();
            out[s] += q;
        }
        out
    }
}

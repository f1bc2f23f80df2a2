//! File formats: feeder descriptions, injection snapshots, CSV emission.
//!
//! The feeder schema mirrors the in-memory model field for field; impedances
//! are nested arrays of `[r, x]` pairs sized |phases|², phases are compact
//! strings like "abc". All numeric CSV output goes through [`fmt_sig9`] so
//! repeated runs are byte-identical.

use crate::feeder::{
    Branch, Bus, CapacitorBankSpec, DerInverterSpec, DeviceIndex, Feeder, FeederIndex,
    RegulatorSpec, ValidationReport,
};
use crate::linear_flow::Injections;
use crate::phase::PhaseSet;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: {what}")]
    Schema { path: String, what: String },
    #[error("feeder failed validation:\n{0}")]
    Invalid(ValidationReport),
    #[error("profile {path}: {source}")]
    Profile {
        path: String,
        source: crate::profiles::ProfileError,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FeederFile {
    name: String,
    vnom: f64,
    power_base_mva: f64,
    v0: Vec<f64>,
    buses: Vec<BusFile>,
    branches: Vec<BranchFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BusFile {
    id: usize,
    phases: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capacitor: Option<CapacitorFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    der: Option<DerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    load_profile: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    der_profile: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    load_p: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    load_q: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    der_p: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CapacitorFile {
    phases: String,
    step_q: f64,
    max_steps: u32,
    per_step_limit: u32,
    daily_limit: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DerFile {
    phases: String,
    s_inv: f64,
    reserve_factor: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BranchFile {
    from: usize,
    to: usize,
    phases: String,
    /// Row-major complex entries as [r, x] pairs.
    z: Vec<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regulator: Option<RegulatorFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RegulatorFile {
    tap_min: i32,
    tap_max: i32,
    tap_step: f64,
    per_step_limit: u32,
    daily_limit: u32,
    ganged: bool,
}

fn parse_phases(s: &str, path: &str, whose: &str) -> Result<PhaseSet, IoError> {
    PhaseSet::parse(s).map_err(|e| IoError::Schema {
        path: path.to_string(),
        what: format!("{whose}: {e}"),
    })
}

fn feeder_from_file(file: FeederFile, path: &str) -> Result<Feeder, IoError> {
    let mut buses = Vec::with_capacity(file.buses.len());
    for b in file.buses {
        let phases = parse_phases(&b.phases, path, &format!("bus {}", b.id))?;
        let n = phases.len();
        let fill = |v: Vec<f64>, what: &str| -> Result<Vec<f64>, IoError> {
            if v.is_empty() {
                Ok(vec![0.0; n])
            } else if v.len() == n {
                Ok(v)
            } else {
                Err(IoError::Schema {
                    path: path.to_string(),
                    what: format!("bus {}: {what} needs {n} entries, got {}", b.id, v.len()),
                })
            }
        };
        let mut bus = Bus::new(b.id, phases);
        bus.load_p = fill(b.load_p, "load_p")?;
        bus.load_q = fill(b.load_q, "load_q")?;
        bus.der_p = fill(b.der_p, "der_p")?;
        bus.load_profile = b.load_profile;
        bus.der_profile = b.der_profile;
        bus.capacitor = match b.capacitor {
            Some(c) => Some(CapacitorBankSpec {
                phases: parse_phases(&c.phases, path, &format!("bus {} capacitor", b.id))?,
                step_q: c.step_q,
                max_steps: c.max_steps,
                per_step_limit: c.per_step_limit,
                daily_limit: c.daily_limit,
            }),
            None => None,
        };
        bus.der = match b.der {
            Some(d) => Some(DerInverterSpec {
                phases: parse_phases(&d.phases, path, &format!("bus {} der", b.id))?,
                s_inv: d.s_inv,
                reserve_factor: d.reserve_factor,
            }),
            None => None,
        };
        buses.push(bus);
    }
    let mut branches = Vec::with_capacity(file.branches.len());
    for (k, br) in file.branches.into_iter().enumerate() {
        let phases = parse_phases(&br.phases, path, &format!("branch {k}"))?;
        let n = phases.len();
        if br.z.len() != n || br.z.iter().any(|row| row.len() != n) {
            return Err(IoError::Schema {
                path: path.to_string(),
                what: format!("branch {k}: z must be {n}x{n} [r, x] pairs"),
            });
        }
        let z = DMatrix::from_fn(n, n, |i, j| Complex64::new(br.z[i][j][0], br.z[i][j][1]));
        branches.push(Branch {
            from_bus: br.from,
            to_bus: br.to,
            phases,
            z,
            regulator: br.regulator.map(|r| RegulatorSpec {
                tap_min: r.tap_min,
                tap_max: r.tap_max,
                tap_step: r.tap_step,
                per_step_limit: r.per_step_limit,
                daily_limit: r.daily_limit,
                ganged: r.ganged,
            }),
        });
    }
    Ok(Feeder::new(
        &file.name,
        buses,
        branches,
        file.v0,
        file.vnom,
        file.power_base_mva,
    ))
}

fn feeder_to_file(f: &Feeder) -> FeederFile {
    FeederFile {
        name: f.name.clone(),
        vnom: f.vnom,
        power_base_mva: f.power_base_mva,
        v0: f.v0.clone(),
        buses: f
            .buses
            .iter()
            .map(|b| BusFile {
                id: b.id,
                phases: b.phases.to_string(),
                capacitor: b.capacitor.as_ref().map(|c| CapacitorFile {
                    phases: c.phases.to_string(),
                    step_q: c.step_q,
                    max_steps: c.max_steps,
                    per_step_limit: c.per_step_limit,
                    daily_limit: c.daily_limit,
                }),
                der: b.der.as_ref().map(|d| DerFile {
                    phases: d.phases.to_string(),
                    s_inv: d.s_inv,
                    reserve_factor: d.reserve_factor,
                }),
                load_profile: b.load_profile.clone(),
                der_profile: b.der_profile.clone(),
                load_p: if b.load_p.iter().all(|&x| x == 0.0) {
                    Vec::new()
                } else {
                    b.load_p.clone()
                },
                load_q: if b.load_q.iter().all(|&x| x == 0.0) {
                    Vec::new()
                } else {
                    b.load_q.clone()
                },
                der_p: if b.der_p.iter().all(|&x| x == 0.0) {
                    Vec::new()
                } else {
                    b.der_p.clone()
                },
            })
            .collect(),
        branches: f
            .branches
            .iter()
            .map(|br| {
                let n = br.phases.len();
                BranchFile {
                    from: br.from_bus,
                    to: br.to_bus,
                    phases: br.phases.to_string(),
                    z: (0..n)
                        .map(|i| (0..n).map(|j| [br.z[(i, j)].re, br.z[(i, j)].im]).collect())
                        .collect(),
                    regulator: br.regulator.as_ref().map(|r| RegulatorFile {
                        tap_min: r.tap_min,
                        tap_max: r.tap_max,
                        tap_step: r.tap_step,
                        per_step_limit: r.per_step_limit,
                        daily_limit: r.daily_limit,
                        ganged: r.ganged,
                    }),
                }
            })
            .collect(),
    }
}

/// Parses and validates a feeder description. Any validation violation makes
/// the load fail; every module downstream assumes a valid feeder.
pub fn load_feeder(path: &Path) -> Result<Feeder, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.display().to_string(),
        source,
    })?;
    feeder_from_json(&text, &path.display().to_string())
}

pub fn feeder_from_json(text: &str, path: &str) -> Result<Feeder, IoError> {
    let file: FeederFile = serde_json::from_str(text).map_err(|source| IoError::Json {
        path: path.to_string(),
        source,
    })?;
    let feeder = feeder_from_file(file, path)?;
    let report = crate::feeder::validate_feeder(&feeder);
    if report.is_ok() {
        Ok(feeder)
    } else {
        Err(IoError::Invalid(report))
    }
}

pub fn feeder_to_json(f: &Feeder) -> String {
    let mut text = serde_json::to_string_pretty(&feeder_to_file(f)).expect("feeder serializes");
    text.push('\n');
    text
}

pub fn save_feeder(f: &Feeder, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, feeder_to_json(f)).map_err(|source| IoError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// One operating point for `pf`: device settings plus per-bus injections.
/// Buses omitted from `buses` contribute zeros; per-phase arrays follow the
/// bus's own phase order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Snapshot {
    #[serde(default)]
    pub taps: Vec<i32>,
    #[serde(default)]
    pub cap_steps: Vec<u32>,
    #[serde(default)]
    pub buses: Vec<SnapshotBus>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SnapshotBus {
    pub bus: usize,
    #[serde(default)]
    pub p_c: Vec<f64>,
    #[serde(default)]
    pub q_c: Vec<f64>,
    #[serde(default)]
    pub p_inv: Vec<f64>,
    #[serde(default)]
    pub q_inv: Vec<f64>,
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

impl Snapshot {
    /// Expands the per-bus rows into full injection vectors, converting
    /// capacitor steps to VArs. The snapshot's `taps` pass through untouched.
    pub fn to_injections(
        &self,
        feeder: &Feeder,
        idx: &FeederIndex,
        devices: &DeviceIndex,
    ) -> Result<Injections, IoError> {
        let mut inj = Injections::zeros(idx.n_bus_phases());
        for row in &self.buses {
            let Some(bus) = feeder.buses.get(row.bus) else {
                return Err(IoError::Schema {
                    path: "snapshot".into(),
                    what: format!("unknown bus {}", row.bus),
                });
            };
            let n = bus.phases.len();
            let spread = |dst: &mut nalgebra::DVector<f64>, src: &[f64], what: &str| {
                if src.is_empty() {
                    return Ok(());
                }
                if src.len() != n {
                    return Err(IoError::Schema {
                        path: "snapshot".into(),
                        what: format!("bus {}: {what} needs {n} entries", row.bus),
                    });
                }
                for (pos, p) in bus.phases.iter().enumerate() {
                    if let Some(slot) = idx.bus_phase_slot(feeder, row.bus, p) {
                        dst[slot] += src[pos];
                    }
                }
                Ok(())
            };
            spread(&mut inj.p_c, &row.p_c, "p_c")?;
            spread(&mut inj.q_c, &row.q_c, "q_c")?;
            spread(&mut inj.p_inv, &row.p_inv, "p_inv")?;
            spread(&mut inj.q_inv, &row.q_inv, "q_inv")?;
        }
        // Omitted cap_steps means parked banks, same as omitted taps.
        let parked;
        let cap_steps = if self.cap_steps.is_empty() {
            parked = vec![0u32; devices.cap_controls.len()];
            &parked
        } else if self.cap_steps.len() != devices.cap_controls.len() {
            return Err(IoError::Schema {
                path: "snapshot".into(),
                what: format!(
                    "cap_steps needs {} entries, got {}",
                    devices.cap_controls.len(),
                    self.cap_steps.len()
                ),
            });
        } else {
            &self.cap_steps
        };
        let q_cap = devices.caps_to_q(feeder, idx, cap_steps);
        for (slot, q) in q_cap.iter().enumerate() {
            inj.q_cap[slot] = *q;
        }
        Ok(inj)
    }

    /// Tap settings with the same omitted-means-neutral rule as `cap_steps`.
    pub fn tap_settings(&self, devices: &DeviceIndex) -> Result<Vec<i32>, IoError> {
        if self.taps.is_empty() {
            return Ok(vec![0; devices.tap_controls.len()]);
        }
        if self.taps.len() != devices.tap_controls.len() {
            return Err(IoError::Schema {
                path: "snapshot".into(),
                what: format!(
                    "taps needs {} entries, got {}",
                    devices.tap_controls.len(),
                    self.taps.len()
                ),
            });
        }
        Ok(self.taps.clone())
    }
}

/// Loads every `*.csv` in `dir` as a profile keyed by file stem. Which keys
/// a feeder actually needs is the caller's concern; an empty or missing
/// directory is an error only when read fails.
pub fn load_profiles(
    dir: &Path,
) -> Result<std::collections::BTreeMap<String, crate::profiles::Profile>, IoError> {
    let entries = std::fs::read_dir(dir).map_err(|source| IoError::Read {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<std::path::PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| IoError::Read {
            path: dir.display().to_string(),
            source,
        })?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "csv") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut out = std::collections::BTreeMap::new();
    for path in paths {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let profile =
            crate::profiles::Profile::load(&path).map_err(|source| IoError::Profile {
                path: path.display().to_string(),
                source,
            })?;
        out.insert(stem.to_string(), profile);
    }
    Ok(out)
}

/// Nine significant digits, scientific notation, negative zero normalized.
/// The single formatting path that makes result files byte-stable.
pub fn fmt_sig9(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.8e}")
}

/// Writes a CSV with one formatting rule for every cell.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), IoError> {
    let wrap = |source: std::io::Error| IoError::Write {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(wrap)?;
    let mut out = std::io::BufWriter::new(file);
    (|| {
        writeln!(out, "{}", header.join(","))?;
        for row in rows {
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()
    })()
    .map_err(wrap)
}

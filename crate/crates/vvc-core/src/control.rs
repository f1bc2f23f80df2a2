//! Lower layer: seconds-scale inverter VAR control.
//!
//! Each DER slot runs a projected integrator on its own voltage measurement,
//! or optionally a memoryless droop. Both are local: slot j reads the squared
//! voltage at its own bus-phase and writes its own injection. Stability of
//! the integrator through the network coupling is a gain condition on the
//! voltage sensitivity matrix, exposed here as `stability_bound`.

use crate::feeder::{DeviceIndex, Feeder, FeederIndex};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("sensitivity matrix is not symmetric (|M - M'| up to {0:.3e})")]
    NotSymmetric(f64),
    #[error("sensitivity matrix is not positive definite (eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),
    #[error("vector lengths disagree: {0}")]
    Shape(&'static str),
}

/// Clamps scheduled squared-voltage references into the feasible window so
/// the integrators never chase an unreachable target.
pub fn project_reference(nu: &DVector<f64>, v_lo: f64, v_hi: f64) -> DVector<f64> {
    nu.map(|v| v.clamp(v_lo, v_hi))
}

/// Instantaneous VAR capability of one inverter: the full circle at the
/// current active output, with no scheduling reserve held back.
pub fn reactive_limit(s_inv: f64, p: f64) -> f64 {
    (s_inv * s_inv - p * p).max(0.0).sqrt()
}

/// Per-DER-slot symmetric VAR limits from a bus-phase active power vector.
pub fn reactive_limits(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    p_inv: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_iterator(
        devices.der_slots.len(),
        devices.der_slots.iter().map(|d| {
            let slot = idx.bus_phase_slot(feeder, d.bus, d.phase).unwrap();
            reactive_limit(d.s_inv, p_inv[slot])
        }),
    )
}

/// Principal submatrix of the bus-phase sensitivity at the DER slots: the
/// coupling the controllers actually close their loop through.
pub fn der_sensitivity(
    feeder: &Feeder,
    idx: &FeederIndex,
    devices: &DeviceIndex,
    m: &DMatrix<f64>,
) -> DMatrix<f64> {
    let slots: Vec<usize> = devices
        .der_slots
        .iter()
        .map(|d| idx.bus_phase_slot(feeder, d.bus, d.phase).unwrap())
        .collect();
    DMatrix::from_fn(slots.len(), slots.len(), |i, j| m[(slots[i], slots[j])])
}

/// One projected-integral update: `q⁺ = clamp(q − γ(v − v_ref))`, all
/// elementwise per DER slot with symmetric limits `±q_max`.
pub fn integral_step(
    q: &DVector<f64>,
    v_meas: &DVector<f64>,
    v_ref: &DVector<f64>,
    gain: f64,
    q_max: &DVector<f64>,
) -> Result<DVector<f64>, ControlError> {
    let n = q.len();
    if v_meas.len() != n || v_ref.len() != n || q_max.len() != n {
        return Err(ControlError::Shape("integral_step inputs"));
    }
    Ok(DVector::from_fn(n, |j, _| {
        let lim = q_max[j];
        (q[j] - gain * (v_meas[j] - v_ref[j])).clamp(-lim, lim)
    }))
}

/// Memoryless droop: `q = clamp(−k(v − v_ref))`.
pub fn droop_step(
    v_meas: &DVector<f64>,
    v_ref: &DVector<f64>,
    gain: f64,
    q_max: &DVector<f64>,
) -> Result<DVector<f64>, ControlError> {
    let n = v_meas.len();
    if v_ref.len() != n || q_max.len() != n {
        return Err(ControlError::Shape("droop_step inputs"));
    }
    Ok(DVector::from_fn(n, |j, _| {
        let lim = q_max[j];
        (-gain * (v_meas[j] - v_ref[j])).clamp(-lim, lim)
    }))
}

/// Largest integral gain below which the closed loop contracts: `2/λ_max(M)`,
/// exclusive. `m` must be the symmetric positive definite DER-slot coupling.
pub fn stability_bound(m: &DMatrix<f64>) -> Result<f64, ControlError> {
    let n = m.nrows();
    if m.ncols() != n || n == 0 {
        return Err(ControlError::Shape("sensitivity matrix must be square"));
    }
    let mut skew: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            skew = skew.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if skew > 1e-9 * m.amax().max(1e-300) {
        return Err(ControlError::NotSymmetric(skew));
    }
    let eigs = m.clone().symmetric_eigenvalues();
    let lmin = eigs.min();
    let lmax = eigs.max();
    if lmin <= 0.0 {
        return Err(ControlError::NotPositiveDefinite(lmin));
    }
    Ok(2.0 / lmax)
}

/// Spectral norm of `I − γM` for symmetric `M`: the per-step contraction
/// factor of the unsaturated integral loop under the linear voltage model.
pub fn contraction_factor(m: &DMatrix<f64>, gain: f64) -> f64 {
    let n = m.nrows();
    let shifted = DMatrix::identity(n, n) - m * gain;
    shifted
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |acc, &l| acc.max(l.abs()))
}

//! Two-layer Volt/VAR control for unbalanced radial distribution feeders.
//!
//! The crate models a radial feeder with voltage regulators, capacitor banks
//! and DER inverters, and closes two control loops over it: an hourly
//! receding-horizon MIQP that schedules the discrete devices, and a
//! seconds-scale projected-integral controller that steers inverter reactive
//! power toward the scheduled voltage references. A backward/forward sweep
//! power flow serves as the nonlinear plant for both layers.

pub mod control;
pub mod feeder;
pub mod io;
pub mod linear_flow;
pub mod miqp;
pub mod phase;
pub mod power_flow;
pub mod profiles;
pub mod qp;
pub mod scheduler;
pub mod sim;

pub use feeder::{Feeder, FeederIndex, IncidenceMatrices};
pub use phase::{Phase, PhaseSet};

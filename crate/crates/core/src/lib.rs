//! Simulator and verification lab for the stochastic continuity equation
//! with nonlinear, degenerate flux noise, built on its kinetic BGK
//! approximation.

pub mod bgk;
pub mod diagnostics;
pub mod error;
pub mod fields;
pub mod flow;
pub mod kinetic;
pub mod pucci;

pub use error::{Error, Result};
pub use kinetic::{DensityField, Grid, KineticField, KineticMeasureField};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! Experiment runner for the kinetic-noise simulator: config validation,
//! orchestration and reproducible output.

pub mod config;
pub mod manifest;
pub mod run;

pub use config::{validate_config, ConfigError, ExperimentConfig, ExperimentKind};
pub use manifest::RunManifest;
pub use run::{run_experiment, RunError};

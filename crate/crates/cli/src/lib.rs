//! Config-driven experiment runner.

pub mod config;
pub mod results;
pub mod run;

pub use config::{ExperimentConfig, Mode};
pub use run::run;

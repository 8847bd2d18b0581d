//! Experiment driver for the mesh optimization simulator: JSON configs,
//! built-in presets, and the `run`, `sweep` and `drops` commands.

pub mod config;
pub mod error;
pub mod experiment;
pub mod output;

pub use config::{Command, ExperimentConfig};
pub use error::CliError;
pub use experiment::{cmd_drops, cmd_run, cmd_sweep, Outcome, Settings};

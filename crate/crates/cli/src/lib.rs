//! Experiment configuration, results persistence and command implementations
//! behind the `peft-forge` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod store;
pub mod summary;

pub use config::{ExperimentConfig, Overrides};
pub use error::CliError;

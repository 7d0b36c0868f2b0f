//! Experiment driver for `mistlab`: configuration, model snapshots and the
//! train / shadow / attack / ablate / oracle / report pipeline.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod snapshot;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};

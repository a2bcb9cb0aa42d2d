//! Experiment orchestration for the `augweight` binary: run configs,
//! training and comparison runs, verification suites and their reports.

pub mod commands;
pub mod compare;
pub mod config;
pub mod error;
pub mod metrics;

pub use config::RunConfig;
pub use error::{CliError, CliResult, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, EXIT_VERIFY};

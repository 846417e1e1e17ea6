//! Command-line harness around `capa-core`: artifact generation, profiling,
//! calibration, execution and reports.

pub mod args;
pub mod artifacts;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod reports;
pub mod stages;

pub use error::{CliError, CliResult, EXIT_CONFIG, EXIT_STAGE};

//! Experiment harness for CV@R-SGD: configuration, runs over seeds,
//! diagnostics and CSV/JSON artifacts.

pub mod cli;
pub mod config;
pub mod diagnose;
pub mod error;
pub mod experiment;
pub mod output;

pub use config::ExperimentConfig;
pub use error::CliError;

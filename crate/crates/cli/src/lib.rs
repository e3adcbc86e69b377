//! Experiment driver: JSON configuration, the subcommands and their reports.

pub mod commands;
pub mod config;

pub use commands::{run, CliError, Command, CommandReport, RunOptions};
pub use config::{ConfigError, ExperimentConfig};

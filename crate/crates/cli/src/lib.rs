//! Experiment harness for the `bssm` command: configuration and presets,
//! a hash-keyed cache of training runs, report tables and self-checks.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use commands::{execute, resolve_config, Cli, Command};
pub use config::{preset, ExperimentConfig, Overrides, SweepAxis};
pub use error::{exit, CliError, CliResult};

//! Command-line harness: TOML experiment configs, sweeps, oracle tables,
//! refinement and distillation runs with CSV output.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;

pub use config::{ConfigError, ExperimentConfig, LoadedConfig};

//! Configuration parsing and experiment orchestration behind the `aclf-lab` binary.

pub mod config;
pub mod experiment;

pub use config::{parse_config, parse_str, ConfigError, ExperimentConfig, ScenarioKind};
pub use experiment::{build_runs, run_experiment, ExperimentReport, RunError, RunOutcome};

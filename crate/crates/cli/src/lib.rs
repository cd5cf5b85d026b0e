//! Experiment runner for `dho2-core`: TOML configs, artifact writing and
//! memory/communication reports.

pub mod config;
pub mod problem;
pub mod report;
pub mod run;

pub use config::{ConfigError, ExperimentConfig, Overrides};
pub use problem::{build_problem, Problem};
pub use report::{comm_report, memory_report, CommReport, MemoryReport};
pub use run::{metrics_csv, run_experiment, RunOutput, Summary};

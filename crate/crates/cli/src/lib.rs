//! Configuration-driven experiment runner for `mvsde-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= 1.0)` also rejects NaN

pub mod commands;
pub mod compare;
pub mod config;
pub mod distance;
pub mod error;
pub mod run;

pub use commands::{execute, Cli, Command};
pub use compare::{compare_runs, CompareReport, Tolerances};
pub use config::{load_config, parse_config, ExperimentConfig};
pub use error::{CliError, Result};
pub use run::{run_experiment, RunSummary, Stages};

//! Configuration, experiment drivers and result files.

pub mod config;
pub mod runner;
pub mod summary;

pub use config::{ExperimentConfig, Method, Mode, ShiftConfig};
pub use runner::{
    prepare_data, run_experiment, run_lambda_sweep, run_multisource, Report, RunKind, RunRecord,
};
pub use summary::{SummaryRow, SummaryTable};

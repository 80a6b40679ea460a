//! Config loading, experiment orchestration and CSV output.

mod config;
mod output;
mod runner;

use thiserror::Error;

pub use config::{
    load_config, validate_config, AvSection, ExperimentConfig, ExperimentKind, Overrides,
    ToyControllerKind, ToySection, Trigger,
};
pub use output::{
    av_diagnostics_table, av_trace_table, toy_trace_table, Table, AV_DIAGNOSTICS_COLUMNS,
    AV_TRACE_COLUMNS, TOY_TRACE_COLUMNS,
};
pub use runner::{config_hash, deterministic_files, run_experiment, FlaggedRun, RunOutcome};

use crate::av::AvError;
use crate::toy::ToyError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Read(String),
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {reason}")]
    Config { field: String, reason: String },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Av(#[from] AvError),
}

impl ScenarioError {
    /// The config could not be read, parsed or validated.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            ScenarioError::Read(_) | ScenarioError::Parse(_) | ScenarioError::Config { .. }
        )
    }
}

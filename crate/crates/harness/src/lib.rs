//! Experiment harness: runs plain, accelerated and accelerated+averaged
//! training over several seeds, writes one CSV per run and summarizes them.

use std::path::PathBuf;

use aadl_core::data::DataError;
use aadl_core::models::ModelError;
use aadl_core::TrainError;
use thiserror::Error;

pub mod aggregate;
pub mod config;
pub mod problem;
pub mod runner;

pub use aggregate::{aggregate_dir, aggregate_records, mean_band, AggregateRow, Band};
pub use config::{ExperimentConfig, Method, ProblemConfig};
pub use runner::{run_experiment, run_single, MethodSummary, RunRecord, RunResult, Summary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config{}: {message}", path.as_ref().map(|p| format!(" {}", p.display())).unwrap_or_default())]
    ConfigParse { path: Option<PathBuf>, message: String },
    #[error("invalid `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("dataset {path} not found; download it or set problem.kind = \"mlp_synthetic\" to use the synthetic fallback")]
    DatasetMissing { path: PathBuf },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("no run files found in {0}")]
    NoRuns(PathBuf),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// 1 for problems with the invocation or config, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ConfigRead { .. }
            | HarnessError::ConfigParse { .. }
            | HarnessError::Config { .. }
            | HarnessError::DatasetMissing { .. } => 1,
            _ => 2,
        }
    }
}

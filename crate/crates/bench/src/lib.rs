//! Experiment harness: method × label-budget grids, supervised baselines,
//! hyper-parameter sweeps and their reports.

pub mod config;
pub mod report;
pub mod runner;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{DatasetSource, ExperimentFile, ExperimentSpec, Sweep, SweepParam};
pub use report::{CellError, Comparison, ResultsTable, RunKind, RunRecord, Stat, SweepTable};
pub use runner::{emit_grid, parse_grid, Cell, Experiment};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: expected format {expected}, found {found:?}")]
    Format { path: PathBuf, expected: String, found: Option<String> },
    #[error(transparent)]
    Data(#[from] sslab::data::DataError),
    #[error(transparent)]
    Train(#[from] sslab::trainer::TrainError),
    #[error(transparent)]
    Ssl(#[from] sslab::ssl::SslError),
    #[error("run failed: {0}")]
    Run(String),
}

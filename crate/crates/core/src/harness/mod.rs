//! Experiment plumbing: configuration, synthetic cities, training and
//! evaluation runs, reports and the command line.

pub mod cli;
pub mod config;
pub mod report;
pub mod run;
pub mod synth;

use thiserror::Error;

use crate::backbone::{CheckpointError, ModelError, TrainError};
use crate::ingest::IngestError;
use crate::retrieve::RetrieveError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("report: {0}")]
    Report(String),
}

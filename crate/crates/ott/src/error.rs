use std::path::{Path, PathBuf};

use ott_core::train::{FailureRecord, TrainError};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::corpus::CorpusError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("run diverged: {0}")]
    Diverged(FailureRecord),
    #[error("theory suites failed: {0}")]
    Theory(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for divergence, 4 for failed theory
    /// suites, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Train(TrainError::Config(_)) => 2,
            CliError::Diverged(_) => 3,
            CliError::Theory(_) => 4,
            _ => 1,
        }
    }
}

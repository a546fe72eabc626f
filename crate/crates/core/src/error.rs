use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("parse error in record {id}: {reason}")]
    Parse { id: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Artifacts that cannot be used together, e.g. a checkpoint and a
    /// corpus with different vocabularies.
    #[error("incompatible artifacts: {0}")]
    Compatibility(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use bridging_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BridgingError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("vectors line {line}: {message}")]
    Vectors { line: usize, message: String },
    #[error("contextual vectors for document `{doc_id}`: {message}")]
    Contextual { doc_id: String, message: String },
    #[error("invalid fold count {k} for {documents} documents")]
    Folds { k: usize, documents: usize },
    #[error("value {0} cannot be bucketed (must be >= 1)")]
    Bucket(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint configuration differs at `{field}`: expected {expected}, found {found}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("non-finite loss at epoch {epoch}, document `{doc_id}`")]
    NonFiniteLoss { epoch: usize, doc_id: String },
    #[error(transparent)]
    Numeric(#[from] AutodiffError),
}

impl BridgingError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BridgingError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = BridgingError> = std::result::Result<T, E>;

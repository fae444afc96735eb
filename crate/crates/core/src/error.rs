use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}")]
    Dimension(String),

    #[error("softmax row {row} has no unmasked entry")]
    InvalidMask { row: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("non-finite value in {path}")]
    NonFinite { path: String },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss = {loss})")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: line {line}: {message}")]
    Data {
        path: String,
        line: u64,
        message: String,
    },

    #[error("{0}")]
    Metric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

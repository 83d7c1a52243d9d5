use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("batch-size error: {0}")]
    BatchSize(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no usable pairs: {0}")]
    EmptyPairs(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

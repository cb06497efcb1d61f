use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty batch")]
    EmptyBatch,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix not positive definite")]
    NotPositiveDefinite,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contrastive term needs a batch of at least 2 instances")]
    ContrastiveBatch,

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("missing recording file {0}")]
    MissingRecording(PathBuf),

    #[error("non-finite sample in {0}")]
    NonFiniteSample(PathBuf),

    #[error("malformed dataset: {0}")]
    Format(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stale trace: parameters changed since the forward pass")]
    StaleTrace,

    #[error("divergence at step {step}{}", last_checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Divergence {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of the operands do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar argument lies outside its valid domain (negative sigma, bad epoch, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Wrong number of frames in a temporal window.
    #[error("arity error: expected {expected} frames, got {actual}")]
    Arity { expected: usize, actual: usize },

    /// Parameters are in the wrong train/eval state for the requested operation.
    #[error("state error: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    /// Training aborted. `last_checkpoint` is the most recent checkpoint
    /// written before the failure, if any.
    #[error("training error: {message}")]
    Training {
        message: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("flow backend error: {0}")]
    Flow(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
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

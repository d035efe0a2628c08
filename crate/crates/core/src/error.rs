use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {msg}")]
    Annotation {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    ImageFormat { path: PathBuf, msg: String },

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("model format version {found} is unsupported (expected {expected})")]
    ModelVersion { found: u64, expected: u64 },

    #[error("model layer {layer}: shape mismatch (expected {expected:?}, found {found:?})")]
    ModelShape {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

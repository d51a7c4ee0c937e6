use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated buffer: expected {expected} bytes, found {found}")]
    TruncatedBuffer { expected: usize, found: usize },

    #[error("byte count mismatch: header implies {expected} bytes, found {found}")]
    ByteCountMismatch { expected: usize, found: usize },

    #[error("label {label} at voxel {index} is not below num_classes={num_classes}")]
    InvalidLabel {
        label: u8,
        index: usize,
        num_classes: usize,
    },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

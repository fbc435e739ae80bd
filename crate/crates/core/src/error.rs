//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by volume operations, the network engine, the denoising
/// pipeline and file I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two volumes or tensors that must share a shape do not.
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    /// Shape mismatch on network tensors or parameter blocks.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A metric or estimator was asked to reduce over an empty mask.
    #[error("mask selects no voxels")]
    EmptyMask,

    /// Network weights do not fit the requested architecture.
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    /// Training produced a non-finite loss value.
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    /// A weight or volume file is malformed.
    #[error("malformed file {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

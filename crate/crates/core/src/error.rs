use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid direction {0:?}: expected a finite unit vector")]
    InvalidDirection([f64; 3]),

    #[error("Newton iteration produced a non-finite direction from {0:?}")]
    PoisonedDirection([f64; 3]),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("position {position:?} (voxel {voxel:?}) is outside the image domain")]
    OutOfDomain { position: [f64; 3], voxel: [f64; 3] },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tape poisoned: node {node} produced a non-finite value")]
    TapePoisoned { node: usize },

    #[error("output is a constant and carries no gradient")]
    NoGradient,

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

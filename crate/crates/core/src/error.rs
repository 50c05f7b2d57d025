use std::path::PathBuf;

use thiserror::Error;

use crate::image::Domain;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("resolution mismatch: {0}x{0} vs {1}x{1}")]
    ResolutionMismatch(usize, usize),

    #[error("domain mismatch: expected {expected:?}, got {actual:?}")]
    DomainMismatch { expected: Domain, actual: Domain },

    #[error("infeasible dataset specification: {0}")]
    Infeasible(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("manifest rejected:\n{}", .0.join("\n"))]
    Manifest(Vec<String>),

    #[error("numeric divergence at iteration {iteration}: {message}")]
    Divergence { iteration: u64, message: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("config digest mismatch: file has {found}, run expects {expected}")]
    DigestMismatch { found: String, expected: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("matrix square root failed: {0}")]
    SquareRoot(String),

    #[error("missing attributes for item {0} and no surrogate predictor supplied")]
    MissingAttributes(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Serde(e.to_string())
    }
}

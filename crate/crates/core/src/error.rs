use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Param { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{path}: row {row}: {reason}")]
    Row {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("{path}: no samples")]
    NoSamples { path: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("degenerate mixture fit: all losses coincide, treat samples as a single component")]
    DegenerateFit,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("activation cache is stale: recorded for parameter version {cached}, network is at {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("{0} requires both clean and noisy samples")]
    SingleClass(&'static str),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("epoch {epoch} aborted: {reason}")]
    Aborted { epoch: usize, reason: String },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// Variants map one-to-one onto the failure classes the CLI reports, so the
/// binary can derive exit codes from them without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("scanpath is empty")]
    EmptyScanpath,

    #[error("invalid stimulus: {0}")]
    InvalidStimulus(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("integrity error in {path}: {msg}")]
    Integrity { path: PathBuf, msg: String },

    #[error("no segmentation map for stimulus {0}")]
    MissingSegmentation(String),

    #[error("missing feature for {0}")]
    MissingFeature(String),

    #[error("need at least {needed} scanpaths per set, got {got}")]
    InsufficientScanpaths { needed: usize, got: usize },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

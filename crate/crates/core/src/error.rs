//! Error type shared across the crate.

use std::path::PathBuf;

/// Everything that can go wrong while loading data, talking to providers,
/// or computing metrics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate record id {id:?} at {path}:{line}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("invalid record {id:?}: {message}")]
    InvalidRecord { id: String, message: String },

    /// Transport or backend failure; carries the request digest so a failed
    /// call can be located in the cache directory.
    #[error("provider failure for request {digest}: {message}")]
    Provider { digest: String, message: String },

    #[error("unparseable backend reply: {0}")]
    BadReply(String),

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("metric unavailable: {0}")]
    UnavailableMetric(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
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

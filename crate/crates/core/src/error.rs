use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the encoding-model library.
///
/// Variants mirror the failure classes a batch front end needs to tell
/// apart: malformed inputs, files that disagree with their manifests,
/// invariant violations, and numerical breakdowns.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}

pub(crate) use ensure;

//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("entity extraction failed for passage {passage_id}: {message}")]
    Extraction { passage_id: String, message: String },

    #[error("embedding request failed for batch rows {start}..{end}: {message}")]
    Embedding {
        start: usize,
        end: usize,
        message: String,
    },

    #[error("remote call failed: {0}")]
    Remote(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index integrity error: {0}")]
    IndexIntegrity(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

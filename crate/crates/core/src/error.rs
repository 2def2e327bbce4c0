use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RrlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RrlError {
    #[error("unknown environment kind `{0}`")]
    UnknownEnvKind(String),

    #[error("unknown tier `{0}`")]
    UnknownTier(String),

    #[error("unknown mode `{0}`")]
    UnknownMode(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {token} is outside the vocabulary (size {size})")]
    OutOfVocabulary { token: u32, size: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("prefix length {len} exceeds the limit {limit}")]
    PrefixTooLong { len: usize, limit: usize },

    #[error("non-finite {what} in batch [{batch}]")]
    NonFinite { what: &'static str, batch: String },

    #[error("no buffered state {state:?} for problem `{problem_id}`")]
    EntryNotFound { problem_id: String, state: Vec<u32> },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl RrlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RrlError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        RrlError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

//! Shared error type for all pipeline stages.

use crate::backend::BackendError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: line {line}: malformed record: {msg}")]
    MalformedLine {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate id \"{id}\" at line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing prerequisite stage: {0}")]
    MissingStage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

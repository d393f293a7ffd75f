use std::path::PathBuf;

use thiserror::Error;

use crate::gateway::ModelReply;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("duplicate document id {0}")]
    DuplicateDocId(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("corrupt segment {0}: checksum mismatch")]
    CorruptSegment(String),

    #[error("corpus has no retrievable cells")]
    EmptyCorpus,

    #[error("graph has no observations")]
    EmptyGraph,

    #[error("unknown question {0}")]
    UnknownQuestion(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures of a single model round-trip.
#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request timed out after {0} ms")]
    Timeout(u64),

    #[error("http error: {0}")]
    Http(String),

    /// The backend answered but the reply did not match the expected schema.
    /// The raw reply is kept so callers can log or inspect it.
    #[error("reply violates schema {schema}: {reason}")]
    SchemaViolation {
        schema: String,
        reason: String,
        reply: Box<ModelReply>,
    },

    #[error("no scripted reply for role {role} key {key}")]
    MissingFixture { role: String, key: String },

    #[error("channel {0} is disabled")]
    Disabled(String),
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("labeler contract violated for query {query_id}: {detail}")]
    LabelerContract { query_id: String, detail: String },

    #[error("labeler request failed: {0}")]
    LabelerTransport(String),

    #[error("checkpoint kind mismatch: expected `{expected}`, found `{found}`")]
    KindMismatch { expected: String, found: String },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("corrupt checkpoint at byte offset {offset}: {detail}")]
    CorruptCheckpoint { offset: u64, detail: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("pipeline failed on query {query_id}: {source}")]
    Pipeline {
        query_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs rather than by a defect
    /// or an environment failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Input(_)
            | Error::Config(_)
            | Error::KindMismatch { .. }
            | Error::ConfigMismatch(_)
            | Error::CorruptCheckpoint { .. }
            | Error::Parse { .. }
            | Error::Json(_)
            | Error::LabelerContract { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Pipeline { source, .. } => source.is_input_error(),
            Error::LabelerTransport(_) | Error::NonFinite { .. } => false,
        }
    }
}

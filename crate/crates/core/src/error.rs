use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the search stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("declaration error: {0}")]
    Declaration(String),
    #[error("reference error: unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("compile error: {0}")]
    Compile(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("load error in {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("communication error{}: {message}", rank.map(|r| format!(" with rank {r}")).unwrap_or_default())]
    Comm {
        rank: Option<usize>,
        message: String,
    },
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("environment is closed")]
    Closed,
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn comm(rank: usize, message: impl Into<String>) -> Self {
        Error::Comm {
            rank: Some(rank),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

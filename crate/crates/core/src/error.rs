use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("transport error (request {request_id}): {message}")]
    Transport { request_id: String, message: String },

    #[error("protocol error: HTTP {status}: {body}")]
    Protocol { status: u16, body: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures that originate in a chat/judge backend rather than in local data.
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport { .. } | Error::Protocol { .. })
    }
}

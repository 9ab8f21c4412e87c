use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ModtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ModtError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed binary scan data.
    #[error("{path}: {message} (byte offset {offset})")]
    ScanFormat {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    /// Malformed line in a text file (ground truth, tracks, detections, manifests).
    #[error("{path}:{line}: {message}")]
    TextFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Runtime(String),
}

impl ModtError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ModtError::InvalidInput(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        ModtError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 2 for input-format problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ModtError::ScanFormat { .. } | ModtError::TextFormat { .. } | ModtError::Config(_) => 2,
            _ => 1,
        }
    }
}

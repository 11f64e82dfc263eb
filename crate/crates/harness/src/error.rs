use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// `line` is 1-based; 0 means the problem is not tied to one line
    /// (an environment override or a cross-key constraint).
    #[error("config error (line {line}): {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Core(#[from] atd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
}

impl LabError {
    pub fn config(line: usize, message: impl Into<String>) -> Self {
        LabError::Config {
            line,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type LabResult<T> = std::result::Result<T, LabError>;

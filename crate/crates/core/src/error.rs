use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the audit pipeline.
///
/// The variants map onto the command-line exit codes: `Config` is a usage
/// problem, `Validation` and `Io` are data problems, `Numeric` is a fitting
/// or estimation failure.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("validation error at row {row}, column `{column}`: {message}")]
    Row {
        row: usize,
        column: String,
        message: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl AuditError {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        AuditError::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AuditError::Config(msg.into())
    }

    pub(crate) fn row(row: usize, column: impl Into<String>, message: impl Into<String>) -> Self {
        AuditError::Row {
            row,
            column: column.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AuditError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;

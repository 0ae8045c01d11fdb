use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file did not match its binary layout; `field` names the offending part.
    #[error("format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension error: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },

    #[error("configuration error in `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { field: field.into(), detail: detail.into() }
    }

    pub(crate) fn dim(expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension { expected: expected.to_string(), got: got.to_string() }
    }

    /// True for errors caused by bad user input rather than a failure at runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Config { .. } | Error::Manifest { .. }
        )
    }
}

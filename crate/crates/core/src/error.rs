use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The first group are caller mistakes (bad flags, shapes, domains); the
/// rest are runtime failures. [`Error::is_validation`] draws that line for
/// the command-line exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("domain error: expected {expected}, found {found}")]
    Domain { expected: String, found: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported head: {0}")]
    UnsupportedHead(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("validation failed on `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("empty scope: {0}")]
    EmptyScope(String),
    #[error("non-finite loss at step {step} ({what}); batch ids: {ids:?}")]
    NonFinite {
        step: u64,
        what: String,
        ids: Vec<String>,
    },
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parameter(_)
                | Error::Domain { .. }
                | Error::Shape(_)
                | Error::UnsupportedHead(_)
                | Error::Validation { .. }
                | Error::Conflict(_)
                | Error::NotFound(_)
                | Error::EmptyScope(_)
        )
    }

    pub(crate) fn domain(expected: impl ToString, found: impl ToString) -> Self {
        Error::Domain {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

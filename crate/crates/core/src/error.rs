use std::path::{Path, PathBuf};

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or geometry that do not fit the operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value outside the admissible domain (e.g. a non-positive scale).
    #[error("domain error: {0}")]
    Domain(String),

    /// NaN or infinity where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A gradient-check function evaluation returned a non-finite value.
    #[error("evaluation failed at {param}[{index}] ({direction}): value {value}")]
    Evaluation {
        param: usize,
        index: usize,
        direction: &'static str,
        value: f64,
    },

    /// Training or optimization produced a non-finite quantity.
    #[error("divergence at step {step} in {location}")]
    Divergence { step: usize, location: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for numerical failures (divergence, non-finite evaluations).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Evaluation { .. } | Error::Divergence { .. }
        )
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn csv(path: &Path, e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::format(path, format!("{other:?}")),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

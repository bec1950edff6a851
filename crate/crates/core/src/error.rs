use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported dtype `{dtype}` for tensor `{tensor}`")]
    UnsupportedDtype { tensor: String, dtype: String },

    #[error("tensor `{tensor}`: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        tensor: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor `{tensor}` is missing from {side}")]
    MissingTensor { tensor: String, side: String },

    #[error("task vector `{model_id}` was computed against a different base manifest")]
    FingerprintMismatch { model_id: String },

    #[error("no coefficient for model `{model_id}` at tensor `{tensor}`")]
    MissingCoefficient { model_id: String, tensor: String },

    #[error("tensor `{tensor}`: expected a 2-D matrix, got shape {shape:?}")]
    NotAMatrix { tensor: String, shape: Vec<usize> },

    #[error("{field}: {message}")]
    Validation { field: String, message: String },

    #[error("calibration stats: {0}")]
    Stats(String),

    #[error("numerical failure at `{tensor}`: {message}")]
    Numerical { tensor: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::UnsupportedDtype { .. } => 3,
            Error::Numerical { .. } => 4,
            _ => 2,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OokdError>;

#[derive(Debug, Error)]
pub enum OokdError {
    /// A configuration or input value failed validation. `field` names the offending key.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents do not match the expected schema.
    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OokdError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        OokdError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        OokdError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OokdError::Io {
            path: path.into(),
            source,
        }
    }
}

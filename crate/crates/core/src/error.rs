use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AhanError>;

#[derive(Debug, Error)]
pub enum AhanError {
    /// Operand shapes do not fit the operation.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A configuration key violates a constraint.
    #[error("config `{key}`: {constraint}")]
    Config { key: String, constraint: String },

    /// A loss term became NaN or infinite during training.
    #[error("non-finite {term} loss ({value}) at step {step}")]
    NonFinite { term: &'static str, value: f64, step: usize },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl AhanError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AhanError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        AhanError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        AhanError::Config {
            key: key.into(),
            constraint: constraint.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AhanError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        AhanError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

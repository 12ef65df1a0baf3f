use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum DcerError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input too short: need at least {min} steps, got {got}")]
    InputTooShort { min: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint incompatible with architecture; missing: {missing:?}, extra: {extra:?}")]
    Incompatible {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DcerError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DcerError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DcerError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numbers blowing up rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, DcerError::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, DcerError>;

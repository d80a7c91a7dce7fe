//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum SignetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("unsupported image format for {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("depth value {value} mm out of the representable range [0, 65535]")]
    DepthRange { value: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("empty input: {context}")]
    EmptyInput { context: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("solver did not converge within {iterations} iterations (relative residual {residual:.3e}, tolerance {tolerance:.3e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("invalid parameter {name}: {reason}")]
    Parameter { name: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric domain error: {0}")]
    MetricDomain(String),

    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, SignetError>;

impl SignetError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SignetError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        SignetError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

//! Error types shared across the crate.

use crate::tensor::data::Shape;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {shape}")]
    NonScalarOutput { shape: Shape },

    #[error("no gradient recorded for requested tensor")]
    NoGradient,

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("{0}")]
    Invalid(String),
}

/// Errors from file formats and on-disk layout (frames, flows, manifests,
/// checkpoints).
#[derive(Debug, Error)]
pub enum IoFormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Malformed { path: String, detail: String },

    #[error("png error on {path}: {detail}")]
    Png { path: String, detail: String },

    #[error("json error on {path}: {detail}")]
    Json { path: String, detail: String },
}

impl IoFormatError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        IoFormatError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn malformed(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        IoFormatError::Malformed { path: path.as_ref().display().to_string(), detail: detail.into() }
    }
}

/// Configuration parsing / validation errors.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },

    #[error("invalid value for `{key}`: {detail}")]
    BadValue { key: String, detail: String },
}

/// Top-level pipeline error, aggregating the layer-specific ones.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] IoFormatError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Invalid(String),
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("unknown label index {label} (model has {num_classes} classes)")]
    UnknownLabel { label: usize, num_classes: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sampler produced a non-finite noise prediction at step {step}")]
    NonFiniteAtStep { step: usize },

    #[error("training aborted after {0} consecutive non-finite losses")]
    Diverged(usize),

    #[error("method {method} is not available for this domain: {reason}")]
    UnsupportedMethod { method: String, reason: String },

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two operands disagree on a dimension.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A required input (targets, labels, component) is absent.
    #[error("missing input: {0}")]
    Missing(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("malformed NIfTI header in {}: {reason}", .path.display())]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported NIfTI payload in {}: {reason}", .path.display())]
    UnsupportedPayload { path: PathBuf, reason: String },

    /// Configuration could not be parsed or failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("could not find {needed} patches with foreground fraction >= {threshold} after {attempts} attempts")]
    InsufficientForeground {
        needed: usize,
        threshold: f64,
        attempts: usize,
    },

    /// A mask needed for a distance metric has no voxels of the class.
    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint has {expected}, run config has {found}")]
    ConfigHashMismatch { expected: String, found: String },

    /// A request would allocate more memory than the configured budget.
    #[error("out of memory budget: {0}")]
    Memory(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

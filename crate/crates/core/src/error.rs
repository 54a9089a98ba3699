use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("backward needs a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite gradient in parameter `{id}`")]
    NonFiniteGradient { id: String },

    #[error("non-finite value in `{what}` at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("empty environment {0}")]
    EmptyEnvironment(usize),

    #[error("predictor role mismatch: expected {expected}, got {got}")]
    RoleMismatch { expected: &'static str, got: &'static str },

    #[error("{method} needs descriptors on every example; use RGM for descriptor-free data")]
    MissingDescriptors { method: &'static str },

    #[error("degenerate descriptor batch: {0}")]
    DegenerateDescriptors(String),

    #[error("missing batch for environment {0}")]
    MissingBatch(usize),

    #[error("probability table not normalized: {0}")]
    Unnormalized(String),

    #[error("i/o failure at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("parse failure: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short stable tag used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::EmptyBatch(_) => "empty_batch",
            Error::EmptyEnvironment(_) => "empty_environment",
            Error::RoleMismatch { .. } => "role_mismatch",
            Error::MissingDescriptors { .. } => "missing_descriptors",
            Error::DegenerateDescriptors(_) => "degenerate_descriptors",
            Error::MissingBatch(_) => "missing_batch",
            Error::Unnormalized(_) => "unnormalized",
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
        }
    }
}

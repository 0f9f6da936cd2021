//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmtaError {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar was required (e.g. backward on a non-scalar output).
    #[error("{op} requires a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    /// Operation on an empty sequence (e.g. mean over zero time steps).
    #[error("{0} called on an empty sequence")]
    EmptySequence(&'static str),

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value showed up where finite math was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input data violates an integrity constraint.
    #[error("data integrity error: {0}")]
    Data(String),

    /// A pipeline stage was invoked out of order (e.g. model fed unimputed data).
    #[error("pipeline order error: {0}")]
    PipelineOrder(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SmtaError>;

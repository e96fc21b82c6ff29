//! Error types shared across the simulator.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SimError>;

/// Errors emitted by tensors, models, data loading, aggregation, and I/O.
#[derive(Debug, Error)]
pub enum SimError {
    /// A tensor primitive received incompatible shapes.
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A public tensor operation produced a NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// An operation that requires data received none.
    #[error("empty input to `{0}`")]
    EmptyInput(&'static str),

    /// A precondition on an operation's arguments was violated.
    #[error("invalid argument to `{op}`: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A configuration value failed validation.
    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    /// Dataset files failed to parse or violated format invariants.
    #[error("data error: {0}")]
    Data(String),

    /// An aggregation rule's preconditions were not met.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// Checkpoint or trigger artifact files failed validation.
    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor I/O, embedding, and the statistical tests.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Bad magic bytes, unsupported version, or unknown dtype flag.
    #[error("format error: {0}")]
    Format(String),

    /// Payload shorter (or longer) than the header promises.
    #[error("length error: expected {expected} bytes of payload, found {actual}")]
    Length { expected: u64, actual: u64 },

    /// Data violates a structural invariant (non-finite values, shape
    /// mismatches between tensor and manifest, asymmetric distances, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Caller passed an argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Input admits no meaningful answer (e.g. a distance matrix with no
    /// positive spectrum, or a group with fewer than two agents).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),
}

pub type Result<T> = std::result::Result<T, Error>;

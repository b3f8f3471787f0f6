//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A structured-text document could not be parsed (message carries line info).
    #[error("parse error: {0}")]
    Parse(String),

    /// An invariant of a domain type was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// A classifier answer contained no recognizable content.
    #[error("empty answer (unmatched tokens: {unmatched:?})")]
    EmptyAnswer { unmatched: Vec<String> },

    /// A classifier answer mixed "no artifacts" with artifact categories.
    #[error("conflicting answer: {0:?} names both \"no artifacts\" and categories")]
    ConflictingAnswer(String),

    /// A category id outside the taxonomy.
    #[error("unknown category id {0}")]
    UnknownCategory(usize),

    /// An operation received an argument outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Paired sequences of unequal length.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// An operation that requires at least one element got none.
    #[error("empty input")]
    EmptyInput,

    /// A dataset record violated the documented schema.
    #[error("schema error in record {record:?}: {message}")]
    Schema { record: String, message: String },

    /// File version (checkpoint or dataset) incompatible with this build.
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    /// Network-level failure talking to a remote classifier.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },

    /// The remote classifier replied with a non-conforming body.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training diverged or produced non-finite weights.
    #[error("training error: {0}")]
    Training(String),

    /// Sampling produced a non-finite state.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A numerical quantity (ratio, gradient) became non-finite.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

use thiserror::Error;

/// Errors produced by varlab operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("radius {radius} is below the resolution limit {limit} (4 x mesh scale)")]
    Resolution { radius: f64, limit: f64 },

    #[error("test function support is not compactly contained in the domain: {0}")]
    NotCompactlySupported(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("multiplicity rounding is ambiguous at node {node:?}: local mass ratio {ratio}")]
    RoundingAmbiguity { node: Vec<i64>, ratio: f64 },

    #[error("multiplicities at node {node:?} sum to {total}, expected {expected}")]
    MultiplicityMismatch {
        node: Vec<i64>,
        total: usize,
        expected: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

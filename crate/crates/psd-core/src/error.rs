//! Error type shared across the crate.

use std::fmt;

/// Errors produced by model construction, solvers, data ingestion and codecs.
#[derive(Debug, Clone, PartialEq)]
pub enum PsdError {
    /// Operand dimensions do not agree.
    ShapeMismatch(String),
    /// A scalar or configuration value violates its contract.
    InvalidParameter(String),
    /// An operation precondition does not hold (e.g. non-unit-norm dictionary).
    Precondition(String),
    /// A dictionary column collapsed to (near) zero where a norm is required.
    DegenerateColumn(usize),
    /// Problem size exceeds a hard limit (e.g. the oracle's enumeration bound).
    SizeLimit(String),
    /// Input data is structurally invalid (empty set, misaligned sets, ...).
    InvalidInput(String),
    /// Byte-level parse failure; `offset` is the position in the input.
    Parse { offset: usize, message: String },
    /// A computation produced a non-finite value.
    NonFinite(String),
}

impl fmt::Display for PsdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PsdError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            PsdError::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            PsdError::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            PsdError::DegenerateColumn(j) => write!(f, "dictionary column {j} is degenerate"),
            PsdError::SizeLimit(msg) => write!(f, "size limit exceeded: {msg}"),
            PsdError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            PsdError::Parse { offset, message } => {
                write!(f, "parse error at byte {offset}: {message}")
            }
            PsdError::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl std::error::Error for PsdError {}

pub type Result<T> = std::result::Result<T, PsdError>;

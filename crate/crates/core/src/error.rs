//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty passband: no frequency bin falls inside [{low} Hz, {high} Hz] for T={origin_len}, fs={sample_rate}")]
    EmptyPassband {
        low: f64,
        high: f64,
        origin_len: usize,
        sample_rate: f64,
    },

    #[error("conjugate-symmetry violation: imaginary residue {residue:.3e} exceeds tolerance {tolerance:.3e}")]
    SymmetryViolation { residue: f64, tolerance: f64 },

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("step index {k} out of range 1..={max}")]
    StepOutOfRange { k: usize, max: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("mask has no foreground mass")]
    EmptyMask,

    #[error("mask degenerates to zero mass at feature level {0}")]
    DegenerateMask(usize),

    #[error("box out of bounds: {0}")]
    OutOfBounds(String),

    #[error("scale {0} not invertible (must exceed 1e-3)")]
    InvalidScale(f64),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("all candidate losses are non-finite")]
    AllCandidatesFailed,

    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors produced by the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch must not be empty")]
    EmptyBatch,

    #[error("spatial size {height}x{width} is not divisible by {divisor}")]
    Indivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("mask contains a value other than 0 or 1 ({0})")]
    NonBinaryMask(f64),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("checkpoint does not match model: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {term} at iteration {iteration}")]
    NonFinite { term: String, iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

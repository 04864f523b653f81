use thiserror::Error;

/// Errors surfaced by the rehearsal laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("bin index {bin} out of range for {bins} bins")]
    BinOutOfRange { bin: usize, bins: usize },

    #[error("sample {id} has no entry in {what}")]
    MissingEntry { id: usize, what: &'static str },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("budget overdraft in {category}: consumed {consumed:.3} of {allocated:.3} allocated")]
    Overdraft {
        category: &'static str,
        consumed: f64,
        allocated: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

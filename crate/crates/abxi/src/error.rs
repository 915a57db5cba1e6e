//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input row; carries the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Invalid configuration (bad field values, unknown variant names, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Data-level failure (empty corpus, short sequence, exhausted pool, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape or index mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required (NaN loss etc.).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 0 success, 2 config error, 3 data error, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Data(_) | Error::Shape(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

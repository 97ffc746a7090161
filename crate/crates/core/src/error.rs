//! Crate-wide error type.
//!
//! The CLI maps these onto process exit codes: config errors exit 2, data
//! errors exit 3, numerical/contract failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape error in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// Input is in-domain by type but degenerate by value (e.g. zero-norm
    /// vector fed to a cosine similarity).
    #[error("degenerate input to {op}: {details}")]
    Degenerate { op: &'static str, details: String },

    /// A numerical procedure failed (non-SPD solve, non-finite values).
    #[error("numerical failure in {op}: {details}")]
    Numerical { op: &'static str, details: String },

    /// A documented operation contract was violated by the caller.
    #[error("contract violation in {op}: {details}")]
    Contract { op: &'static str, details: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }

    pub fn degenerate(op: &'static str, details: impl Into<String>) -> Self {
        Error::Degenerate { op, details: details.into() }
    }

    pub fn numerical(op: &'static str, details: impl Into<String>) -> Self {
        Error::Numerical { op, details: details.into() }
    }

    pub fn contract(op: &'static str, details: impl Into<String>) -> Self {
        Error::Contract { op, details: details.into() }
    }

    pub fn config(details: impl Into<String>) -> Self {
        Error::Config(details.into())
    }

    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

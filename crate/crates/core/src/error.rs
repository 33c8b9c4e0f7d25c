//! Crate-wide error type. Variants are grouped by how the CLI maps them to
//! exit statuses: usage/configuration problems, bad input data, and numerical
//! failures are distinguished so scripts can react to each.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an index) disagree on dimensions.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A caller passed a value outside an operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A model or run configuration is internally inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input files or records could not be used.
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint file is malformed, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training or evaluation produced non-finite values.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// A brute-force oracle hit its state or parameter budget.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Bad command line or config-file key.
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Argument(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => 2,
            Error::Numeric(_) | Error::Oracle(_) => 3,
            Error::Shape { .. } => 3,
        }
    }
}

//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A value outside the operation's mathematical domain (bad temperature,
    /// non-distribution rows, non-finite results).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Index out of range (labels, tasks, experts).
    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    /// Invalid configuration (mismatched expert counts, bad ratios, bad ranks).
    #[error("configuration error: {0}")]
    Config(String),

    /// A direction matrix developed an all-zero column; the magnitude/direction
    /// recomposition is undefined and we refuse to clamp.
    #[error("singular column in {op}: column {col} of the direction matrix has zero norm")]
    SingularColumn { op: &'static str, col: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index { op, detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    /// Stable machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::Index { .. } => "index",
            Error::Config(_) => "config",
            Error::SingularColumn { .. } => "singular_column",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Shared error type for the whole engine.

/// Errors surfaced by any module of the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received tensors whose shapes cannot be combined.
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller-supplied argument violates an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data (files, scene dirs, checkpoints) is missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A numeric procedure failed (divergence, degenerate alignment, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code class for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::ShapeMismatch { .. } | Error::Numeric(_) => 3,
        }
    }
}

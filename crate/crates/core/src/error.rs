use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite or underflowed quantity; `component` names the stage.
    #[error("numerical failure in {component}: {detail}")]
    NumericalFailure { component: &'static str, detail: String },

    #[error("degenerate target embedding: E·u has zero norm")]
    DegenerateTarget,

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("file truncated at byte {offset}: {expected} bytes needed")]
    Truncated { offset: u64, expected: u64 },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(component: &'static str, detail: impl Into<String>) -> Self {
        Error::NumericalFailure {
            component,
            detail: detail.into(),
        }
    }
}

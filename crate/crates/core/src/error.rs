//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An input violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Backward was requested on a graph whose buffers were released.
    #[error("graph already released; rebuild it before calling backward again")]
    GraphReleased,

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A configuration key or value is unusable.
    #[error("config error: {0}")]
    Config(String),

    /// A file's contents do not match the expected format.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidInput(detail.into())
    }
}

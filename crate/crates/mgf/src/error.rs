use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum MgfError {
    /// A caller-supplied argument violates an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was invoked on an object in the wrong state
    /// (e.g. an optimizer step without gradients).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Tensor or image extents do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A stereological measurement has no defined value on this input.
    #[error("measurement undefined: {0}")]
    MeasurementUndefined(String),

    /// Synthetic-data generation could not satisfy its placement constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    /// Config file parse or validation failure; `line` is 1-based.
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    /// Malformed weight, image, or table file.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MgfError {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        MgfError::InvalidArgument(msg.into())
    }

    pub fn shape_mismatch(msg: impl Into<String>) -> Self {
        MgfError::ShapeMismatch(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, MgfError>;

use thiserror::Error;

/// Errors surfaced by tensor ops, model construction, training, and file I/O.
#[derive(Error, Debug)]
pub enum SsomError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("dimension error in {op}: got {got:?}, expected {expected}")]
    Dimension {
        op: &'static str,
        got: Vec<usize>,
        expected: String,
    },

    #[error("non-finite value produced by {op} at index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SsomError>;

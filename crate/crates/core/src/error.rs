use thiserror::Error;

/// Errors surfaced by every layer of the planner.
#[derive(Debug, Error)]
pub enum Error {
    /// Network or layer shapes that cannot be wired together.
    #[error("configuration error: {0}")]
    Config(String),
    /// Runtime input outside its declared domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Invalid argument to a pure math routine.
    #[error("argument error: {0}")]
    Argument(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Non-finite values appeared during optimization.
    #[error("training error: {0}")]
    Training(String),
    /// An API was called in a state that does not allow it.
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

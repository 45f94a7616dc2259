use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: non-finite {coefficient} at {point}")]
    InvalidProblem { coefficient: String, point: String },

    #[error("unknown registry problem `{0}` (expected example1, example2 or affine)")]
    UnknownProblem(String),

    #[error("parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("integration blow-up: non-finite value on path {path} at step {step}")]
    Blowup { path: usize, step: usize },

    #[error("backward solver diverged: non-finite value on path {path} at step {step}")]
    Divergence { path: usize, step: usize },

    #[error("control value {value:?} at step {step} is outside the control set")]
    ControlOutsideSet { step: usize, value: Vec<f64> },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

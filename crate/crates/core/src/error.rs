use thiserror::Error;

/// Errors produced by the estimation library and its front ends.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("singular design: reciprocal condition {rcond:.3e} below threshold {threshold:.1e}")]
    SingularDesign { rcond: f64, threshold: f64 },

    #[error("SVD did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SingularDesign { .. } | Error::NoConvergence { .. } | Error::Numeric(_) => 3,
            Error::Config(_) => 4,
            _ => 2,
        }
    }
}

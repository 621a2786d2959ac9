use thiserror::Error;

/// Errors produced by the smoothing library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (dimensions, parameters, schedules).
    #[error("configuration error: {0}")]
    Config(String),

    /// A covariance could not be factorized even after jitter escalation.
    #[error("matrix not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    /// A function evaluation produced a non-finite value.
    #[error("non-finite evaluation in {context} (point index {index})")]
    Eval { context: String, index: usize },

    /// An integration produced a non-finite state.
    #[error("divergence at t = {t} ({context})")]
    Divergence { t: f64, context: String },

    /// A required matrix inversion failed.
    #[error("singular matrix at node {node} ({context})")]
    Singular { node: usize, context: String },

    /// A resource cap was exceeded.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

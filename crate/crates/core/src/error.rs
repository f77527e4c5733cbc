use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite even after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid scale parameter {0}; must be positive and finite")]
    InvalidScale(f64),

    #[error("invalid covariance (s11={s11}, s22={s22}, s12={s12})")]
    InvalidCov { s11: f64, s22: f64, s12: f64 },

    #[error("zero variance at the first layer; the input is zero and sigma_b = 0")]
    ZeroDiagonal,

    #[error("sign-limit kernels need sigma_b > 0 or non-parallel inputs")]
    NonParallelRequired,

    #[error("kernel entry ({row}, {col}) is divergent")]
    DivergentKernel { row: usize, col: usize },

    #[error("Gram matrix is singular")]
    SingularGram,

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("activation `{0}` has no derivative; a surrogate is required")]
    MissingSurrogate(String),

    #[error("loss became non-finite or diverged at step {step} (loss {loss:e})")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot parse `{input}`: {reason}")]
    Parse { input: String, reason: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

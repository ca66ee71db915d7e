use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("time {s} outside the domain [0, {horizon}]")]
    Domain { s: f64, horizon: f64 },

    #[error("cholesky factorization failed at pivot {pivot}")]
    Factorization { pivot: usize },

    #[error("singular matrix (condition estimate {cond:e})")]
    Singular { cond: f64 },

    #[error("transition kernel degenerate at s = {s}: {reason}")]
    KernelDegenerate { s: f64, reason: String },

    #[error("closed-form transition refused: schedules do not commute")]
    NonCommuting,

    #[error("covariance degenerate (min eigenvalue {min_eig:e} < 1e-12); use the eps-truncated bound")]
    DegenerateCovariance { min_eig: f64 },

    #[error("divergence of the reverse-time integration at t = {t}")]
    Divergence { t: f64 },

    #[error("non-finite gradient in term `{term}`")]
    NonFiniteGradient { term: &'static str },

    #[error("estimation failed at s = {s}: {source}")]
    Estimation {
        s: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Attaches the diffusion time at which an estimation step failed.
    pub(crate) fn at_time(self, s: f64) -> Self {
        match self {
            e @ Error::Estimation { .. } => e,
            other => Error::Estimation {
                s,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, looking through estimation context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Estimation { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

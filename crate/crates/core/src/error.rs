use thiserror::Error;

/// Errors raised by the estimation core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("cannot build an orthonormal system: {0}")]
    Orthonormalization(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("projection did not converge after {iterations} iterations (residual {residual:.3e})")]
    ProjectionConvergence { iterations: usize, residual: f64 },

    #[error("simplex QP did not converge after {iterations} iterations (duality gap {gap:.3e})")]
    Solver { iterations: usize, gap: f64 },

    #[error("linear solve failed: {reason} (condition estimate {condition:.3e})")]
    Numeric { reason: String, condition: f64 },

    #[error("covariate matrix is rank deficient; collinear columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error(
        "cross-validation fold failed (lambda {lambda:?}, held-out period {period}): {source}"
    )]
    CvFold {
        /// `None` when the failure happened in the lambda-independent FSC step.
        lambda: Option<f64>,
        period: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("placebo refit failed for unit {unit}: {source}")]
    Placebo {
        unit: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for errors caused by malformed or inconsistent inputs rather than
    /// numerical breakdown.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Dimension(_)
            | Error::InvalidGrid(_)
            | Error::Domain(_)
            | Error::InvalidInput(_)
            | Error::RankDeficient { .. } => true,
            Error::CvFold { source, .. } | Error::Placebo { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    /// Invalid user input: bad file contents, inconsistent dimensions,
    /// out-of-range values and the like.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A quantity left its mathematical domain (e.g. a rate outside (0,1),
    /// a non-positive precision).
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerical failure during computation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A statistic is undefined for the given data (e.g. Moran's I with
    /// zero sample variance).
    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    /// A latent-field constraint (sum-to-zero) does not hold.
    #[error("constraint violated: {0}")]
    ConstraintViolated(String),

    /// The requested quantity does not apply to this model specification.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// An unknown parameter name was requested from a fit.
    #[error("unknown parameter {name:?}; available: {available}")]
    UnknownParameter { name: String, available: String },

    /// The sampler failed to reach a workable acceptance rate.
    #[error("divergent adaptation in block {block:?}: acceptance {rate:.4} < 0.01 after adaptation; consider a longer adaptation window, more iterations, or re-scaling the covariates")]
    DivergentAdaptation { block: String, rate: f64 },

    /// The log joint density was not finite at the sampler's starting point.
    #[error("non-finite log joint at initialization: offending term {term:?}")]
    NonFiniteInit { term: String },
}

impl Error {
    /// True when the error stems from user-supplied input rather than an
    /// internal numerical failure. CLI exit codes key off this.
    pub fn is_user_input(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Validation(_)
                | Error::Domain(_)
                | Error::NotApplicable(_)
                | Error::UnknownParameter { .. }
        )
    }
}

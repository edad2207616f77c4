use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("linear system is singular or not positive definite")]
    SingularSystem,

    #[error("matrix is not positive semidefinite (minimum eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("covariance matrix is singular")]
    SingularCovariance,

    #[error("log-likelihood evaluated to a non-finite value")]
    NonFiniteLikelihood,

    #[error("gradient contains a non-finite entry")]
    NonFiniteGradient,

    #[error("parameter {index} became non-finite at iteration {iteration}")]
    NonFiniteParameter { iteration: u64, index: usize },

    #[error("variational parameters map to a degenerate distribution")]
    DegenerateDistribution,

    #[error("model has no feed-forward layer decomposition")]
    NotFeedForward,

    #[error("curvature factors have not been populated yet")]
    FactorsUninitialized,

    #[error("rating {value} is negative or not an integer")]
    NonIntegerRating { value: f64 },

    #[error("every run in the grid diverged")]
    AllRunsDiverged,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

impl Error {
    /// Numerical failures that signal a diverging run rather than a usage error.
    /// A singular curvature solve counts: mid-run it means the parameters have
    /// left the region where the damped matrix is numerically invertible.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteParameter { .. }
                | Error::NonFiniteLikelihood
                | Error::NonFiniteGradient
                | Error::DegenerateDistribution
                | Error::SingularSystem
        )
    }
}

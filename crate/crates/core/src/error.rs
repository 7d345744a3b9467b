use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("treatment label {0} absent")]
    MissingLabel(usize),

    #[error("derivative requested at the origin (subdifferential at origin)")]
    SubdifferentialAtOrigin,

    #[error("the L1 regularizer has no shifted component; use the plain loss gradient")]
    NoShiftedForm,

    #[error("restricted Gram matrix is singular for cohort {cohort}")]
    SingularGram { cohort: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no convergence: {message}")]
    NonConvergence {
        message: String,
        /// Objective traces of the failed runs, when available.
        traces: Vec<Vec<f64>>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn no_convergence(msg: impl Into<String>) -> Self {
        Error::NonConvergence {
            message: msg.into(),
            traces: Vec::new(),
        }
    }

    /// True for failures caused by the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::NonFinite(_) | Error::SingularGram { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("row {0} has zero norm and cannot be normalized")]
    ZeroNormRow(usize),

    #[error("invalid pair map: {0}")]
    BadPairMap(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("{classes} classes do not fit in dimension {dim} (limit {limit})")]
    TooManyClasses {
        classes: usize,
        dim: usize,
        limit: usize,
    },

    #[error("SVD did not converge after {sweeps} sweeps")]
    ConvergenceFailure { sweeps: usize },

    #[error("raw row {row} collapsed to norm {norm:e} at step {step}")]
    DivergedToZero { step: usize, row: usize, norm: f64 },

    #[error("non-finite value encountered at step {step}")]
    NonFinite { step: usize },

    #[error("{labeled} labeled samples cannot cover {classes} classes")]
    InsufficientLabels { labeled: usize, classes: usize },

    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: &'static str, reason: String },
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

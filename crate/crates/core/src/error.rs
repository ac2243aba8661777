use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    /// A bordered extension whose Schur complement fell at or below the
    /// degeneracy threshold; usually a duplicated support point.
    #[error("degenerate border at index {index}: Schur complement {schur:e} <= {threshold:e}")]
    DegenerateBorder {
        index: usize,
        schur: f64,
        threshold: f64,
    },

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("discount factor {0} outside [0, 1]")]
    InvalidDiscount(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("action index {index} invalid for an action set of size {len}")]
    InvalidAction { index: usize, len: usize },

    #[error("empty action set")]
    EmptyActionSet,

    #[error("value system has no finite solution: {0}")]
    NotFinite(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_discount(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidDiscount(gamma))
    }
}

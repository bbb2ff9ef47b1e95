use thiserror::Error;

/// Errors from the shared linear-algebra and ensemble layer.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize, context: &'static str },
    #[error("ensemble needs at least two members, got {0}")]
    EnsembleTooSmall(usize),
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("matrix is not positive semi-definite")]
    NotPositiveSemiDefinite,
    #[error("covariance entry {index} is negative ({value})")]
    NegativeVariance { index: usize, value: f64 },
}

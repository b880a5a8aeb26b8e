use thiserror::Error;

pub type Result<T> = std::result::Result<T, SaraError>;

#[derive(Debug, Error)]
pub enum SaraError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context} at flat index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("row {row} has zero norm and cannot be rescaled")]
    ZeroRow { row: usize },

    #[error("feature map produced a non-finite entry at ({row}, {col})")]
    Overflow { row: usize, col: usize },

    #[error("construction requires A < 0, got {0}")]
    NonNegativeA(f64),

    #[error("normalizer of query row {row} is {denominator:e}, at or below the degeneracy threshold")]
    DegenerateRow { row: usize, denominator: f64 },

    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("input norms differ: expected {expected}, got {actual}")]
    NormMismatch { expected: f64, actual: f64 },

    #[error("training diverged at step {step}: loss {loss}")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error("malformed matrix file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_mismatch(
    context: &'static str,
    expected: impl ToString,
    actual: impl ToString,
) -> SaraError {
    SaraError::DimensionMismatch {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

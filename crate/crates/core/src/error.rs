use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("masked entry B[{row},{col}] is nonzero")]
    MaskViolation { row: usize, col: usize },

    #[error("|d[{index}]| = {value:e} is below the floor {floor:e}")]
    DiagonalFloor { index: usize, value: f64, floor: f64 },

    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: &'static str },

    #[error("m = {m} exceeds dense FIM budget of {max}")]
    DenseBudget { m: usize, max: usize },

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e}); increase damping")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("non-finite value in {what} at component {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::CgNotConverged { .. }
            | Error::NonFinite { .. }
            | Error::DiagonalFloor { .. } => true,
            Error::AtStep { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

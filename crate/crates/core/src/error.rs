//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enumeration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("inconsistent system: residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    InconsistentSystem { residual: f64, tol: f64 },

    #[error("penalty parameter must be positive, got {0}")]
    NonPositiveRho(f64),

    #[error("convenient sampling requires an identity dual metric")]
    RequiresIdentityG,

    #[error("sample size tau={tau} outside 1..={q}")]
    TauOutOfRange { tau: usize, q: usize },

    #[error("sketch set of size {0} exceeds the exact-binomial limit of {max}", max = crate::sketch::MAX_EXACT_SET_SIZE)]
    QTooLarge(usize),

    #[error("row index {index} out of range for {len} rows")]
    RowIndexOutOfRange { index: usize, len: usize },

    #[error("block index set is empty")]
    EmptyBlock,

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("sketch set violates the exactness assumption: {0}")]
    ExactnessViolation(String),

    #[error("cesaro tracking is disabled for this run")]
    TrackingDisabled,

    #[error("no iterations have been performed")]
    ZeroIterations,

    #[error("invalid problem spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

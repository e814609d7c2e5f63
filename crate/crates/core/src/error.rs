use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("nozzle clearance violated at cell {cell}: {clearance:.4} mm < {required:.4} mm")]
    ClearanceViolation {
        cell: usize,
        clearance: f64,
        required: f64,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("covariance matrix is singular or not positive definite")]
    SingularCovariance,

    #[error("precision matrix is singular or not positive definite")]
    SingularPrecision,

    #[error("Q_uu not positive definite at step {step}")]
    NotPositiveDefinite { step: usize },

    #[error("iLQR diverged: {0}")]
    Diverged(String),

    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("guide {guide} failed: {source}")]
    GuideFailed {
        guide: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("GPS iteration {iteration} failed: {source}")]
    IterationFailed {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("target lies below the initial surface at cell {cell}")]
    InfeasibleTarget { cell: usize },

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("no calibration start produced a finite objective")]
    AllStartsFailed,

    #[error("final surface below initial surface at cell {cell}")]
    NegativeDeposit { cell: usize },

    #[error("incompatible policy checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::StepFailed {
            step,
            source: Box::new(self),
        }
    }

    /// True for failures that stem from numerics rather than bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::ClearanceViolation { .. }
            | Error::SingularCovariance
            | Error::SingularPrecision
            | Error::NotPositiveDefinite { .. }
            | Error::Diverged(_)
            | Error::NonFiniteLoss { .. }
            | Error::AllStartsFailed
            | Error::NegativeDeposit { .. } => true,
            Error::StepFailed { source, .. }
            | Error::GuideFailed { source, .. }
            | Error::IterationFailed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

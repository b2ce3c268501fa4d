use thiserror::Error;

/// Errors raised by the numerical routines and the experiment plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty group")]
    EmptyGroup,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular update at rank-one step {step} (denominator {denominator:e})")]
    SingularUpdate { step: usize, denominator: f64 },

    #[error("infeasible theta (smallest eigenvalue of G {min_eigenvalue:e})")]
    InfeasibleTheta { min_eigenvalue: f64 },

    #[error("degenerate active set: {0}")]
    DegenerateActiveSet(String),

    #[error("infeasible chord: lower {lower} exceeds upper {upper}")]
    InfeasibleChord { lower: f64, upper: f64 },

    #[error("infeasible start point: largest constraint violation {violation:e}")]
    InfeasibleStart { violation: f64 },

    #[error("inconsistent conditioning: observed norm {observed} outside [{lower}, {upper}]")]
    InconsistentConditioning { observed: f64, lower: f64, upper: f64 },

    #[error("empty truncation window [{lower}, {upper}]")]
    EmptyTruncation { lower: f64, upper: f64 },

    #[error("inconsistent region: observed F = {observed} not in truncation region")]
    InconsistentRegion { observed: f64 },

    #[error("conditioning bug: observed response violates transformed constraints by {violation:e}")]
    ConditioningBug { violation: f64 },

    #[error("degenerate prototype Gram matrix")]
    DegenerateGram,

    #[error("non-finite statistic for {0}")]
    NonFiniteStatistic(String),

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("reference tensor has zero norm")]
    DegenerateReference,

    #[error("rank error: {0}")]
    Rank(String),

    #[error("budget of {budget} parameters is below the minimal configuration ({minimum})")]
    InfeasibleBudget { budget: usize, minimum: usize },

    /// The planner could not reach the requested model-wide ratio.
    #[error("target ratio {target} unreachable; best achievable ratio is {best_ratio}")]
    UnreachableTarget { target: f64, best_ratio: f64 },

    #[error("model contains no matrices")]
    EmptyModel,

    #[error("plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("drafted token {0} has zero probability under the draft distribution")]
    DraftSupport(usize),

    #[error("exact oracle limits exceeded: {0}")]
    OracleTooLarge(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}

pub(crate) use bail;

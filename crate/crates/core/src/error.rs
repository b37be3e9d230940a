use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("all weights are zero")]
    AllZero,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("feature span has rank {rank}, expected {dim}")]
    RankDeficient { rank: usize, dim: usize },

    #[error("arm set is affinely degenerate: affine rank {affine_rank} < dimension {dim}")]
    AffinelyDegenerate { affine_rank: usize, dim: usize },

    #[error("operator is near singular (condition estimate {condition:.3e})")]
    NearSingular { condition: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
    },

    #[error("probability of chosen arm {arm} is zero")]
    ZeroProbability { arm: usize },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("horizon too short: exploration rate {gamma} exceeds 1/2")]
    HorizonTooShort { gamma: f64 },

    #[error("penalty estimate h_t = {0:e} collapsed to zero")]
    ZeroEntropy(f64),

    #[error(
        "moment calibration infeasible: |mean|^eps = {mean_moment} leaves no room under {limit}"
    )]
    Infeasible { mean_moment: f64, limit: f64 },

    #[error("optimal arm is not unique (arms {0} and {1} tie)")]
    NonUniqueOptimum(usize, usize),

    #[error("{0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

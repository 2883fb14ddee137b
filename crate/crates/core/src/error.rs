use thiserror::Error;

use crate::linalg::LinalgError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("{what} is numerically singular (condition estimate {cond:e})")]
    Singular { what: String, cond: f64 },
    #[error("{what} is not Hurwitz-stable (min real part {min_real_part:e})")]
    NotHurwitz { what: String, min_real_part: f64 },
    #[error("chain is not ergodic: {0}")]
    NotErgodic(String),
    #[error("invalid oracle: {0}")]
    InvalidOracle(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("iterates diverged at k = {k} (norm {norm:e})")]
    Diverged { k: u64, norm: f64 },
    #[error("decoupling matrix I - beta*U is ill-conditioned at k = {k} (condition {cond:e})")]
    IllConditioned { k: u64, cond: f64 },
    #[error("operation requires a retained noise log")]
    MissingNoiseLog,
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("sample cloud is empty")]
    EmptyCloud,
    #[error("sample cloud is degenerate: {0}")]
    DegenerateCloud(String),
    #[error("{diverged} of {total} replications diverged (limit 1%)")]
    TooManyDivergences { diverged: usize, total: usize },
    #[error("rate fit needs at least 5 points spanning 4 doublings; got {points} points spanning {doublings:.2} doublings")]
    InsufficientGrid { points: usize, doublings: f64 },
    #[error("measured distance {value:.4} at n = {n} is within {factor}x of the replication noise floor {floor:.4}")]
    NoiseFloorViolated {
        n: u64,
        value: f64,
        floor: f64,
        factor: f64,
    },
    #[error("feature Gram matrix E[phi phi^T] is singular (condition {cond:e})")]
    SingularFeatureGram { cond: f64 },
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

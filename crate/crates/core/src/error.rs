use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("quantizer did not converge after {iterations} iterations (last movement {movement:.3e})")]
    QuantizerNotConverged {
        iterations: usize,
        movement: f64,
        last_points: Vec<f64>,
    },

    #[error("scenario tree with {requested} scenarios exceeds the cap of {cap}")]
    TreeTooLarge { requested: u128, cap: u64 },

    #[error("invalid scenario tree: {0}")]
    InvalidTree(String),

    #[error("nothing remains after stage {stage} of a {horizon}-stage process")]
    EmptyRemainder { stage: usize, horizon: usize },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("program is infeasible: {0}")]
    Infeasible(String),

    #[error("gaussian process factorization failed ({0}); try a larger noise variance")]
    Factorization(String),

    #[error("restoration infeasible at stage {stage} of scenario {scenario}: {reason}")]
    Restoration {
        stage: usize,
        scenario: usize,
        reason: String,
    },

    #[error("trajectory infeasible at stage {stage} of scenario {scenario}: violation {violation:.3e}")]
    InfeasibleTrajectory {
        stage: usize,
        scenario: usize,
        violation: f64,
    },

    #[error("no trees requested")]
    NoTrees,

    #[error("all {0} candidate policies failed")]
    AllCandidatesFailed(usize),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

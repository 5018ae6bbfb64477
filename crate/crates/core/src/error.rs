use thiserror::Error;

use crate::constraints::RankReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix contains non-finite entries")]
    InvalidMatrix,

    #[error("matrix is not symmetric positive-definite")]
    NotPositiveDefinite,

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionError {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown frame `{0}`")]
    UnknownFrame(String),

    #[error("supporting constraints do not span the base: rank {} of {}", .0.rank, .0.base_dim)]
    NotSufficientlyConstrained(RankReport),

    #[error(
        "controlled and supporting constraints are dependent: rank(J_c) = {rank_c}, rank(J_f) + rank(J_s) = {rank_f} + {rank_s}"
    )]
    DependentConstraints {
        rank_c: usize,
        rank_f: usize,
        rank_s: usize,
    },

    #[error("controlled-constraint Jacobian is rank deficient ({rank} < {rows}) and no force measurement was supplied")]
    MissingForceMeasurement { rank: usize, rows: usize },

    #[error("decomposition does not match the constraint set ({0})")]
    StaleDecomposition(&'static str),

    #[error("torque nullspace is empty (rank(J_s) = base dimension)")]
    TrivialNullspace,

    #[error("dynamics residual {residual:.3e} lies outside the range of J_s^T")]
    InconsistentDynamics { residual: f64 },

    #[error("equality constraints are infeasible (residual {residual:.3e})")]
    InfeasibleConstraints { residual: f64 },

    #[error("trajectory duration must be positive, got {0}")]
    InvalidDuration(f64),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("level {0} is neither a motion nor a force task")]
    UntaggedLevel(usize),

    #[error("simulation diverged at t = {0:.4} s")]
    SimulationDiverged(f64),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("{context}: {source}")]
    Phase {
        context: String,
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
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionError {
            context,
            expected,
            actual,
        }
    }
}

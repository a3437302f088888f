use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown target policy id {0} (expected 1..=4)")]
    UnknownPolicy(u32),

    #[error("trajectory {index} is inconsistent: {reason}")]
    InvalidTrajectory { index: usize, reason: String },

    #[error("degenerate support: all samples equal {0}")]
    DegenerateSupport(f64),

    #[error("all points identical, bandwidth undefined")]
    DegenerateBandwidth,

    #[error("coverage violation at state {state}, action {action}: behavior visitation is zero")]
    CoverageViolation { state: usize, action: usize },

    #[error("zero behavior probability for observed action {action} in trajectory {trajectory} at t={t}")]
    ZeroPropensity { trajectory: usize, t: usize, action: usize },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("dual objective unbounded below (primal infeasible) at delta {delta:e}")]
    PrimalInfeasible { delta: f64 },

    #[error("no feasible delta in grid (largest tried {largest:e})")]
    NoFeasibleDelta { largest: f64 },

    #[error("csv schema error: {0}")]
    Schema(String),

    #[error("all {0} replications failed")]
    AllReplicationsFailed(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

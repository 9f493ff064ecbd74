//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, file ingestion, and solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("unknown zone `{0}`")]
    UnknownZone(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("mode `{mode}` has no link #{index}")]
    UnknownLink { mode: String, index: usize },
    #[error("mode `{mode}` has no link {tail}->{head}")]
    MissingLink {
        mode: String,
        tail: String,
        head: String,
    },
    #[error("negative flow {0} is outside the cost function domain")]
    NegativeFlow(f64),
    #[error("choice set is empty")]
    EmptyChoiceSet,
    #[error("dissimilarity factor {0} is outside [0, 1]")]
    TauOutOfRange(f64),
    #[error("closed-form nested logit is undefined at tau = 0; use the entropy formulation")]
    TauZeroClosedForm,
    #[error("route has zero length")]
    ZeroLengthRoute,
    #[error("no route between `{origin}` and `{dest}` on mode `{mode}`")]
    Disconnected {
        origin: String,
        dest: String,
        mode: String,
    },
    #[error("margins are unbalanced: total production {production} vs total attraction {attraction}")]
    UnbalancedMargins { production: f64, attraction: f64 },
    #[error("balancing is infeasible: {0}")]
    InfeasibleMargins(String),
    #[error("cost budget {budget} is outside the achievable range [{min}, {max}]")]
    InfeasibleBudget { budget: f64, min: f64, max: f64 },
    #[error("observation hierarchy violated: {constraint} (lhs {lhs}, rhs {rhs})")]
    HierarchyViolation {
        constraint: String,
        lhs: f64,
        rhs: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{what} did not converge (residual {residual:.3e} after {iterations} iterations)")]
    NonConvergent {
        what: String,
        residual: f64,
        iterations: usize,
    },
    #[error("outer multiplier search diverged: residual norms {trace:?}")]
    Divergence { trace: Vec<f64> },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Node indices carried by variants are zero-based, matching the vectors in
/// [`GraphSpec`](crate::GraphSpec). Display strings report them one-based.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid size: a path graph needs at least one node")]
    InvalidSize,

    #[error("invalid weight: {field}[{}] = {value} must be strictly positive", .node + 1)]
    InvalidWeight {
        field: &'static str,
        node: usize,
        value: f64,
    },

    #[error("invalid delay: tau[{}] = {value} must be at least 1", .edge + 1)]
    InvalidDelay { edge: usize, value: i64 },

    #[error("shape mismatch in {field}: expected {expected} entries, found {found}")]
    Shape {
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {field}")]
    NonFinite { field: &'static str },

    #[error("disturbance d_{}[{time}] lies beyond the horizon bound {bound}", .node + 1)]
    HorizonViolation { node: usize, time: i64, bound: i64 },

    #[error("disturbance update d_{}[{time}] is in the past (now = {now})", .node + 1)]
    PastUpdate { node: usize, time: i64, now: i64 },

    #[error("node index {} out of range for a {n}-node graph", .node + 1)]
    NodeOutOfRange { node: usize, n: usize },

    #[error("shifted window of node {} has no entry for time {time}", .node + 1)]
    LedgerRange { node: usize, time: i64 },

    #[error("oracle horizon {t} too short: need more than sigma_N + H = {required}")]
    InvalidHorizon { t: usize, required: usize },

    #[error("trajectory too short: requested time {time}, available {available}")]
    TrajectoryRange { time: i64, available: i64 },

    #[error(
        "Riccati iteration did not converge after {iterations} iterations (residual {residual:e})"
    )]
    RiccatiNonConvergence { iterations: usize, residual: f64 },

    #[error("singular linear system in {context}")]
    Singular { context: &'static str },

    #[error("link between nodes {} and {} failed; round aborted", .from + 1, .to + 1)]
    LinkFailure { from: usize, to: usize },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

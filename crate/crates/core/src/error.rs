use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("infeasible solution: total weight {weight} exceeds capacity {capacity}")]
    Infeasible { weight: u64, capacity: u64 },
    #[error("instance too large: {0}")]
    Size(String),
    #[error("shape mismatch: expected {expected} items, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("phase error: {0}")]
    Phase(String),
    #[error("unknown session: {0}")]
    UnknownSession(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("fewer than two clusters ({0})")]
    DegenerateCluster(usize),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("persistence error: {0}")]
    Persistence(#[from] std::io::Error),
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid problem: {0}")]
    Invalid(String),

    #[error("grid mismatch: expected {expected} steps, found {found}")]
    GridMismatch { expected: usize, found: usize },

    #[error("non-finite value in {what} at node {node}")]
    NonFinite { what: String, node: usize },

    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("tree depth {0} exceeds the oracle bound of 16")]
    DepthExceeded(usize),

    #[error("time {0} is not aligned with the grid")]
    OffGrid(f64),

    #[error("no discrete equilibrium at level {0}: singular one-step Hessian with inconsistent right side")]
    NoDiscreteEquilibrium(usize),

    #[error("uniqueness not checkable: ℛ−𝒟ᵀP₁𝒟 has minimum eigenvalue {min_eig:e} below {delta:e} at node {node}")]
    NotCheckable { node: usize, min_eig: f64, delta: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

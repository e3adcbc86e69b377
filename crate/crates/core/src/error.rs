use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid specification: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("polynomial is not even in z (term with z^{exponent})")]
    SymmetryViolation { exponent: u32 },

    #[error("polynomial degree {0} exceeds the supported maximum of 4")]
    UnsupportedDegree(usize),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("rank-deficient sample set: numerical rank {rank} < {needed} basis functions")]
    RankDeficient { rank: usize, needed: usize },

    #[error("non-finite value at node {node} after {iteration} sweeps")]
    NonFinite { iteration: usize, node: usize },

    #[error("evaluation point at distance {distance:.3e} from the support (minimum {minimum:.3e})")]
    TooCloseToSupport { distance: f64, minimum: f64 },

    #[error("calibration ratio spread {spread:.3} exceeds {limit:.3}")]
    CalibrationSpread { spread: f64, limit: f64 },

    #[error("polynomial is not a certified member of the asymptotics class: {0}")]
    NotAMember(String),

    #[error("truncation box too small: {0}")]
    BoxTooSmall(String),

    #[error("coincidence set touches the boundary of the thin plane")]
    MaskTouchesBoundary,

    #[error("solver did not converge in {iterations} sweeps (last update {last_update:.3e})")]
    NotConverged { iterations: usize, last_update: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DeqError>;

#[derive(Debug, Error)]
pub enum DeqError {
    #[error("quadrature node count {0} outside [8, 512]")]
    InvalidNodes(usize),
    #[error("Hermite moment order {0} not supported (max 4)")]
    InvalidOrder(usize),
    #[error("covariance not positive semidefinite: lam_ii={lam_ii}, lam_jj={lam_jj}, lam_ij={lam_ij}")]
    NotPsd { lam_ii: f64, lam_jj: f64, lam_ij: f64 },
    #[error("{what} did not converge after {iterations} iterations (last change {delta:e})")]
    NoConvergence { what: &'static str, iterations: usize, delta: f64 },
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("invalid activation: {0}")]
    InvalidActivation(String),
    #[error("dimension p={p} too small for K={k} classes (need p >= 8K)")]
    DimensionTooSmall { p: usize, k: usize },
    #[error("Cholesky factorisation failed for class {0}")]
    CholeskyFailure(usize),
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },
    #[error("ragged rows: row {row} has {found} fields, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("NTK diverges: Gdot[{i}][{j}] = {value} >= 1")]
    DivergentNtk { i: usize, j: usize, value: f64 },
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix size {n} exceeds the limit {max}")]
    SizeGuard { n: usize, max: usize },
    #[error("depth 1 cannot match this target: alpha2={alpha2}, alpha3/2={half_alpha3}")]
    DepthInsufficient { alpha2: f64, half_alpha3: f64 },
    #[error("out of memory budget: {0}")]
    OutOfMemory(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DeqError {
    /// True for errors caused by user input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            DeqError::Config(_)
                | DeqError::InvalidActivation(_)
                | DeqError::AssumptionViolated(_)
                | DeqError::InvalidNodes(_)
                | DeqError::DimensionTooSmall { .. }
                | DeqError::Parse { .. }
                | DeqError::RaggedRows { .. }
                | DeqError::Json(_)
                | DeqError::Io(_)
                | DeqError::DimensionMismatch(_)
        )
    }
}

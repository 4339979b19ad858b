use thiserror::Error;

/// Errors raised by the laboratory's numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("correlation matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("correlation matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("number of paths must be at least one")]
    ZeroPaths,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate state: {0}")]
    DegenerateState(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("swap maturity {maturity} already passed at t = {t}")]
    MaturityPassed { t: f64, maturity: f64 },
    #[error("swap hedge matrix is singular: alpha equals gamma ({0})")]
    SingularConfig(f64),
    #[error("hedge system is singular (determinant {0:e})")]
    SingularSystem(f64),
    #[error("regression at step {step} is rank deficient: {alive} alive paths for {basis} basis functions")]
    RegressionRankDeficient { step: usize, alive: usize, basis: usize },
    #[error("picard iteration diverged at step {step} (deltas {deltas:?})")]
    PicardDiverged { step: usize, deltas: Vec<f64> },
    #[error("terminal condition needs the frictionless hedge")]
    MissingHatHedge,
    #[error("payoff derivative is required")]
    MissingDerivative,
    #[error("bundles differ across runs: {0}")]
    InconsistentSeeds(String),
    #[error("arbitrage harness needs a submartingale illiquidity process (identity map, gamma > 0, eta > 0)")]
    NotSubmartingaleParams,
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    /// Failures of the numerical method itself rather than of its inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LabError::DegenerateState(_)
                | LabError::SingularSystem(_)
                | LabError::RegressionRankDeficient { .. }
                | LabError::PicardDiverged { .. }
        )
    }
}

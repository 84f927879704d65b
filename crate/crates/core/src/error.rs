use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("resolution too coarse: {0}")]
    ResolutionTooCoarse(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("grid not nested: {0}")]
    GridNotNested(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("fluid region is not connected")]
    DisconnectedFluid,

    #[error("rigid zones present but no multiplier field supplied")]
    MissingMultiplier,

    #[error("yield stress must be non-negative (got {0})")]
    NegativeYield(f64),

    #[error("inadmissible probe: {0}")]
    InadmissibleProbe(String),

    #[error("no rigidity bracket found up to t = {t_max}")]
    NoBracket { t_max: f64 },

    #[error("permeability matrix is singular or not positive definite")]
    SingularK,

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

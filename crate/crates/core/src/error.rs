use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("point is {distance:.3e} from the boundary (tolerance {tol:.3e})")]
    NotOnBoundary { distance: f64, tol: f64 },

    #[error("model evaluation produced a non-finite value at x = {x:?}")]
    ModelEvaluation { x: Vec<f64> },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("particle {particle} blew up at t = {time}")]
    BlowUp { particle: usize, time: f64 },

    #[error("sampler region does not intersect the domain")]
    DisjointSampler,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{metric} needs at most {limit} points per measure, got {got}; use the Sinkhorn estimator")]
    TooLarge { metric: &'static str, limit: usize, got: usize },

    #[error("too few usable points for a fit: {got} (need {need})")]
    TooFewPoints { got: usize, need: usize },

    #[error("integral diverges: {0}")]
    Divergent(String),

    #[error("CFL condition violated: dt = {dt:.3e}, largest stable step {suggested:.3e}")]
    Cfl { dt: f64, suggested: f64 },

    #[error("no convergence after {iterations} iterations (last change {last_change:.3e})")]
    NoConvergence { iterations: usize, last_change: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

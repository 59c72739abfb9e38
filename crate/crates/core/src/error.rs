use std::path::PathBuf;

use thiserror::Error;

use crate::ode::SolutionTrajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Solver(#[from] SolverError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures raised while integrating.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("non-finite value in stage {stage} at t = {t}")]
    NonFiniteStage { stage: usize, t: f64 },

    #[error("non-finite dynamics value at t = {t}")]
    NonFiniteDerivative { t: f64 },

    #[error("exceeded {max_steps} steps at t = {}", partial.t.last().copied().unwrap_or(f64::NAN))]
    MaxSteps {
        max_steps: usize,
        partial: Box<SolutionTrajectory>,
    },

    #[error("step failure at t = {t}: dt = {dt:e}, q = {q:e}")]
    StepFailure { t: f64, dt: f64, q: f64 },

    #[error("invalid time span ({t0}, {t1})")]
    InvalidSpan { t0: f64, t1: f64 },

    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
}

use serde::{Deserialize, Serialize};

use crate::error::SolverError;

/// Tolerances and step-size control settings.
///
/// The PI exponents are `pi_alpha / order` on the previous error proportion
/// and `pi_beta / order` on the current one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub atol: f64,
    pub rtol: f64,
    /// Safety factor η.
    pub safety: f64,
    pub pi_alpha: f64,
    pub pi_beta: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub max_steps: usize,
    pub max_rejections_per_step: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            atol: 1e-6,
            rtol: 1e-6,
            safety: 0.9,
            pi_alpha: 0.4,
            pi_beta: -0.7,
            dt_min: 1e-12,
            dt_max: f64::INFINITY,
            max_steps: 100_000,
            max_rejections_per_step: 50,
        }
    }
}

impl SolverOptions {
    pub fn with_tolerances(atol: f64, rtol: f64) -> Self {
        Self {
            atol,
            rtol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidOptions(m.to_string()));
        if !(self.atol > 0.0) {
            return bad("atol must be positive");
        }
        if !(self.rtol >= 0.0) {
            return bad("rtol must be non-negative");
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return bad("safety factor must lie in (0, 1)");
        }
        if !(self.dt_min > 0.0) {
            return bad("dt_min must be positive");
        }
        if !(self.dt_max >= self.dt_min) {
            return bad("dt_max must be at least dt_min");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        Ok(())
    }
}

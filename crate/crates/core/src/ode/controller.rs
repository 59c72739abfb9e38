use crate::error::SolverError;
use crate::ode::dynamics::Dynamics;
use crate::ode::options::SolverOptions;

/// Error proportions are floored here before exponentiation.
pub const Q_FLOOR: f64 = 1e-10;
/// Bounds on `dt_new / dt` per controller update.
pub const MIN_GROWTH: f64 = 0.2;
pub const MAX_GROWTH: f64 = 10.0;
/// Returned by [`initial_dt`] when both derivative estimates vanish, i.e.
/// the solution is locally constant to the heuristic's resolution.
pub const INITIAL_DT_FALLBACK: f64 = 1.0;

/// PI step-size proposal `η · q_prev^α · q_n^β · dt`, growth clamped to
/// `[0.2, 10]` and the result to `[dt_min, dt_max]`.
pub fn pi_new_dt(q_n: f64, q_prev: f64, dt: f64, opts: &SolverOptions, order: u32) -> f64 {
    let order = f64::from(order.max(1));
    let qn = if q_n.is_nan() {
        f64::INFINITY
    } else {
        q_n.max(Q_FLOOR)
    };
    let qp = if q_prev.is_nan() {
        1.0
    } else {
        q_prev.max(Q_FLOOR)
    };
    let alpha = opts.pi_alpha / order;
    let beta = opts.pi_beta / order;
    let factor = (opts.safety * qp.powf(alpha) * qn.powf(beta)).clamp(MIN_GROWTH, MAX_GROWTH);
    (factor * dt).clamp(opts.dt_min, opts.dt_max)
}

/// Result of the startup heuristic.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialStep {
    pub dt: f64,
    /// `f(t0, z0)`, reusable as the first stage.
    pub f0: Vec<f64>,
    pub nfe: usize,
}

fn rms_scaled(v: &[f64], scale: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let s: f64 = v.iter().zip(scale).map(|(x, s)| (x / s).powi(2)).sum();
    (s / v.len() as f64).sqrt()
}

/// Two-evaluation startup heuristic: an Euler trial step sized from
/// `‖z0‖/‖f0‖` probes the second derivative, and the step is chosen so the
/// leading error term is about 1% of the tolerance scale.
pub fn initial_dt(
    f: &dyn Dynamics,
    t0: f64,
    z0: &[f64],
    order: u32,
    atol: f64,
    rtol: f64,
) -> Result<InitialStep, SolverError> {
    let d = z0.len();
    let scale: Vec<f64> = z0.iter().map(|z| atol + z.abs() * rtol).collect();
    let mut f0 = vec![0.0; d];
    f.eval(t0, z0, &mut f0);
    if f0.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteDerivative { t: t0 });
    }
    let d0 = rms_scaled(z0, &scale);
    let d1 = rms_scaled(&f0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };

    let z1: Vec<f64> = z0.iter().zip(&f0).map(|(z, g)| z + h0 * g).collect();
    let mut f1 = vec![0.0; d];
    f.eval(t0 + h0, &z1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(&f0).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, &scale) / h0;

    let dt = if !d2.is_finite() {
        h0
    } else if d1.max(d2) <= 1e-15 {
        INITIAL_DT_FALLBACK
    } else {
        let h1 = (0.01 / d1.max(d2)).powf(1.0 / f64::from(order + 1));
        (100.0 * h0).min(h1)
    };
    Ok(InitialStep { dt, f0, nfe: 2 })
}

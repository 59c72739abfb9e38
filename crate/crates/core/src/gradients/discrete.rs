//! Reverse sweep through recorded solver steps.

use crate::error::{Error, Result};
use crate::ode::{Differentiable, SolutionTrajectory, StepOutcome, Tableau};

/// Cotangents injected into a trajectory before the reverse sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectorySeeds {
    /// `∂L/∂z(t_end)`.
    pub final_state: Vec<f64>,
    /// Extra cotangent on knot state `z_j`.
    pub knot_state: Vec<Option<Vec<f64>>>,
    /// Cotangent on knot derivative `f(t_j, z_j)`.
    pub knot_deriv: Vec<Option<Vec<f64>>>,
    /// `∂L/∂q_j` for each accepted step; empty means none.
    pub step_err_weight: Vec<f64>,
}

impl TrajectorySeeds {
    pub fn new(final_state: Vec<f64>, knots: usize) -> Self {
        Self {
            final_state,
            knot_state: vec![None; knots],
            knot_deriv: vec![None; knots],
            step_err_weight: Vec::new(),
        }
    }

    fn add(slot: &mut Option<Vec<f64>>, v: &[f64], w: f64) {
        let buf = slot.get_or_insert_with(|| vec![0.0; v.len()]);
        for (b, x) in buf.iter_mut().zip(v) {
            *b += w * x;
        }
    }

    pub fn add_knot_state(&mut self, j: usize, v: &[f64], w: f64) {
        Self::add(&mut self.knot_state[j], v, w);
    }

    pub fn add_knot_deriv(&mut self, j: usize, v: &[f64], w: f64) {
        Self::add(&mut self.knot_deriv[j], v, w);
    }
}

/// Gradient of the scaled RMS norm w.r.t. `err`, `z_prev` and `z_next`.
/// The subgradient of `max(|a|, |b|)` goes to whichever side attains it.
fn error_norm_backward(
    rec: &StepOutcome,
    weight: f64,
    atol: f64,
    rtol: f64,
    err_bar: &mut [f64],
    z_bar: &mut [f64],
    z_next_bar: &mut [f64],
) {
    let q = rec.q;
    if weight == 0.0 || !(q > 0.0) || !q.is_finite() {
        err_bar.fill(0.0);
        return;
    }
    let n = rec.err.len() as f64;
    for i in 0..rec.err.len() {
        let (a, b) = (rec.z[i], rec.z_next[i]);
        let scale = atol + a.abs().max(b.abs()) * rtol;
        let r = rec.err[i] / scale;
        err_bar[i] = weight * r / (n * q * scale);
        let scale_bar = -weight * r * r / (n * q * scale);
        if a.abs() >= b.abs() {
            z_bar[i] += scale_bar * rtol * a.signum();
        } else {
            z_next_bar[i] += scale_bar * rtol * b.signum();
        }
    }
}

/// Pull `adj_next = ∂L/∂z_next` (plus `err_weight = ∂L/∂q`) back through one
/// step. Parameter gradients are added into `grad_params`; the returned
/// vector is `∂L/∂z` at the step start. `dt` is treated as a constant.
#[allow(clippy::too_many_arguments)]
pub fn step_backward(
    f: &dyn Differentiable,
    tab: &Tableau,
    rec: &StepOutcome,
    adj_next: &[f64],
    err_weight: f64,
    atol: f64,
    rtol: f64,
    grad_params: &mut [f64],
) -> Vec<f64> {
    let d = rec.z.len();
    let s = tab.stages();
    let dt = rec.dt;
    let mut adj_z = vec![0.0; d];
    let mut adj_next = adj_next.to_vec();
    let mut err_bar = vec![0.0; d];
    error_norm_backward(
        rec,
        err_weight,
        atol,
        rtol,
        &mut err_bar,
        &mut adj_z,
        &mut adj_next,
    );

    let mut k_bar = vec![vec![0.0; d]; s];
    let has_err = err_bar.iter().any(|&e| e != 0.0);
    for j in 0..s {
        let (wb, we) = (dt * tab.b[j], dt * tab.b_err[j]);
        for i in 0..d {
            k_bar[j][i] = wb * adj_next[i] + if has_err { we * err_bar[i] } else { 0.0 };
        }
    }
    for i in 0..d {
        adj_z[i] += adj_next[i];
    }

    let mut y_bar = vec![0.0; d];
    for i in (0..s).rev() {
        if k_bar[i].iter().all(|&v| v == 0.0) {
            continue;
        }
        let y = rec.stage_input(tab, i);
        f.vjp(
            rec.t + tab.c[i] * dt,
            &y,
            &k_bar[i],
            &mut y_bar,
            grad_params,
        );
        for v in 0..d {
            adj_z[v] += y_bar[v];
        }
        for j in 0..i {
            let a = tab.a[i][j];
            if a != 0.0 {
                let w = dt * a;
                for v in 0..d {
                    k_bar[j][v] += w * y_bar[v];
                }
            }
        }
    }
    adj_z
}

fn at(v: &[Option<Vec<f64>>], j: usize) -> Option<&[f64]> {
    v.get(j).and_then(|o| o.as_deref())
}

/// Reverse sweep over all recorded steps of `sol`, consuming `seeds`.
/// Adds `∂L/∂θ` into `grad_params` and returns `∂L/∂z0`.
pub fn discrete_backprop_seeded(
    f: &dyn Differentiable,
    tab: &Tableau,
    sol: &SolutionTrajectory,
    seeds: &TrajectorySeeds,
    atol: f64,
    rtol: f64,
    grad_params: &mut [f64],
) -> Result<Vec<f64>> {
    let records = sol
        .stage_records
        .as_ref()
        .ok_or_else(|| Error::State("discrete sensitivities need recorded stages".into()))?;
    let n = records.len();
    if seeds.final_state.len() != f.dim() || grad_params.len() != f.num_params() {
        return Err(Error::Shape("seed or gradient buffer length".into()));
    }
    let knots = n + 1;
    if seeds.knot_state.len() > knots || seeds.knot_deriv.len() > knots {
        return Err(Error::Shape("more knot seeds than knots".into()));
    }

    let mut g = vec![0.0; f.dim()];
    let mut adj = seeds.final_state.clone();
    let mut absorb_knot = |j: usize, adj: &mut Vec<f64>, grad_params: &mut [f64]| {
        if let Some(s) = at(&seeds.knot_state, j) {
            for (a, v) in adj.iter_mut().zip(s) {
                *a += v;
            }
        }
        if let Some(w) = at(&seeds.knot_deriv, j) {
            f.vjp(sol.t[j], &sol.z[j], w, &mut g, grad_params);
            for (a, v) in adj.iter_mut().zip(&g) {
                *a += v;
            }
        }
    };
    absorb_knot(n, &mut adj, grad_params);
    for j in (0..n).rev() {
        let w = seeds.step_err_weight.get(j).copied().unwrap_or(0.0);
        adj = step_backward(f, tab, &records[j], &adj, w, atol, rtol, grad_params);
        absorb_knot(j, &mut adj, grad_params);
    }
    Ok(adj)
}

/// `∂L/∂θ` for a loss depending only on the final state, by reverse sweep.
pub fn discrete_backprop(
    f: &dyn Differentiable,
    tab: &Tableau,
    sol: &SolutionTrajectory,
    seed: &[f64],
    atol: f64,
    rtol: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; f.num_params()];
    let seeds = TrajectorySeeds::new(seed.to_vec(), sol.t.len());
    discrete_backprop_seeded(f, tab, sol, &seeds, atol, rtol, &mut grad)?;
    Ok(grad)
}

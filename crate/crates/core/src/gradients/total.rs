//! Per-item and per-batch gradients of `task_loss + λ·R`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::backsolve::backsolve_adjoint;
use crate::gradients::discrete::{discrete_backprop_seeded, step_backward, TrajectorySeeds};
use crate::model::{argmax, softmax_cross_entropy, NeuralOdeClassifier};
use crate::nn::ModelParams;
use crate::ode::{
    bracket, hermite_weights, solve_adaptive, solve_endpoint_observed, Endpoint, SolverOptions,
    Tableau,
};
use crate::regularization::{
    global_reg_term, local_reg_term, probe_at, reg_value_dq, sample_biased, sample_unbiased,
    ProbeTracker, RegConfig, RegMode,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sensitivity {
    /// Reverse sweep through the recorded solver steps.
    #[default]
    Discrete,
    /// Continuous adjoint solved backwards from the final state.
    Backsolve,
}

impl Sensitivity {
    pub fn as_str(self) -> &'static str {
        match self {
            Sensitivity::Discrete => "discrete",
            Sensitivity::Backsolve => "backsolve",
        }
    }
}

impl fmt::Display for Sensitivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sensitivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Sensitivity::Discrete),
            "backsolve" => Ok(Sensitivity::Backsolve),
            _ => Err(Error::Config(format!(
                "unknown sensitivity {s:?}; expected discrete or backsolve"
            ))),
        }
    }
}

/// Reject regularizer/sensitivity pairs that cannot be differentiated.
pub fn check_combination(mode: RegMode, sensitivity: Sensitivity) -> Result<()> {
    if mode == RegMode::Global && sensitivity == Sensitivity::Backsolve {
        return Err(Error::Config(
            "global regularization cannot use the backsolve adjoint: the penalty sums the error \
             estimate of every accepted step, so its gradient needs the stages of all steps kept \
             from the forward pass (O(steps) memory, discrete sensitivities only). Local \
             regularization needs one probe step and works with either sensitivity."
                .into(),
        ));
    }
    Ok(())
}

/// Counts state-sized buffers alive at once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RetentionMeter {
    current: usize,
    peak: usize,
}

impl RetentionMeter {
    pub fn hold(&mut self, n: usize) {
        self.current += n;
        self.peak = self.peak.max(self.current);
    }

    pub fn release(&mut self, n: usize) {
        self.current = self.current.saturating_sub(n);
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientRequest {
    pub sensitivity: Sensitivity,
    pub reg: RegConfig,
    pub lambda: f64,
}

/// Everything measured while differentiating one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemGradient {
    pub grads: Vec<f64>,
    pub task_loss: f64,
    /// Raw regularizer value `R` (zero when `λ = 0`).
    pub reg_value: f64,
    pub correct: bool,
    pub nfe_forward: usize,
    pub nfe_probe: usize,
    pub nfe_backward: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub t_reg: Option<f64>,
    pub probe_dt: Option<f64>,
    pub peak_buffers: usize,
}

/// Gradient of `CE(head(z(t1)), label) + λ·R` for one example.
///
/// `t_reg`, the probe step size and all accepted step sizes are treated as
/// constants. `item_seed` drives the `t_reg` draw.
#[allow(clippy::too_many_arguments)]
pub fn item_gradient(
    model: &NeuralOdeClassifier,
    params: &ModelParams,
    x: &[f64],
    label: usize,
    request: &GradientRequest,
    tab: &Tableau,
    opts: &SolverOptions,
    tspan: (f64, f64),
    item_seed: u64,
) -> Result<ItemGradient> {
    check_combination(request.reg.mode, request.sensitivity)?;
    let f = model.dynamics(params);
    let z0 = model.initial_state(x)?;
    let discrete = request.sensitivity == Sensitivity::Discrete;
    let regularize = request.reg.mode != RegMode::None && request.lambda != 0.0;
    let (atol, rtol) = (opts.atol, opts.rtol);
    let squared = request.reg.squared;
    let mut meter = RetentionMeter::default();

    let local = regularize && request.reg.mode.is_local();
    let rng = ChaCha8Rng::seed_from_u64(item_seed);

    // discrete sensitivities keep every step; backsolve streams the forward
    // solve and keeps only the final state plus the probe point
    let (sol, probe_point, z1, fwd) = if discrete {
        let sol = solve_adaptive(&f, &z0, tspan, tab, opts, true)?;
        meter.hold(sol.retained_buffers());
        let z1 = sol.final_state().to_vec();
        let fwd = (sol.nfe, sol.accepted_steps(), sol.rejected_steps);
        (Some(sol), None, z1, fwd)
    } else {
        let mut tracker = if local {
            Some(ProbeTracker::new(request.reg.mode, tspan, rng.clone())?)
        } else {
            None
        };
        let end =
            solve_endpoint_observed(&f, &z0, tspan, tab, opts, &mut |step, t_next, f_next| {
                if let Some(tr) = tracker.as_mut() {
                    tr.observe(step, t_next, f_next);
                }
            })?;
        let captured = usize::from(local);
        meter.hold(Endpoint::working_buffers(tab) + captured);
        meter.release(Endpoint::working_buffers(tab) - 1);
        let point = tracker.map(ProbeTracker::finish).transpose()?;
        (
            None,
            point,
            end.z,
            (end.nfe, end.accepted_steps, end.rejected_steps),
        )
    };

    let logits = model.logits(params, &z1)?;
    let (task_loss, dlogits) = softmax_cross_entropy(&logits, label)?;
    let mut grads = vec![0.0; params.len()];
    let zbar1 = model.head_backward(params, &z1, &dlogits, &mut grads)?;

    let mut seeds = sol
        .as_ref()
        .map(|s| TrajectorySeeds::new(zbar1.clone(), s.t.len()));
    let mut jumps = Vec::new();
    let mut reg_value = 0.0;
    let mut nfe_probe = 0;
    let mut t_reg_out = None;
    let mut probe_dt_out = None;

    if regularize && request.reg.mode == RegMode::Global {
        let sol = sol
            .as_ref()
            .expect("global mode runs with discrete sensitivities");
        let seeds = seeds.as_mut().expect("discrete seeds");
        reg_value = global_reg_term(sol, squared)?;
        let records = sol
            .stage_records
            .as_ref()
            .expect("recorded for discrete sensitivities");
        seeds.step_err_weight = records
            .iter()
            .map(|r| request.lambda * reg_value_dq(r.q, r.dt, squared))
            .collect();
    } else if local {
        let sample = match (&sol, probe_point) {
            (Some(sol), _) => {
                let mut rng = rng;
                let t_reg = if request.reg.mode == RegMode::LocalUnbiased {
                    sample_unbiased(tspan, &mut rng)?
                } else {
                    sample_biased(sol, &mut rng)?
                };
                local_reg_term(&f, sol, t_reg, tab, opts, squared)?
            }
            (None, Some((t_reg, u))) => probe_at(&f, t_reg, u, tspan.1, tab, opts, squared)?,
            (None, None) => unreachable!("streaming solves track the probe point in local modes"),
        };
        let t_reg = sample.t_reg;
        meter.hold(sample.retained_buffers());
        reg_value = sample.value;
        nfe_probe = sample.nfe;
        t_reg_out = Some(t_reg);
        probe_dt_out = Some(sample.probe_dt);

        let w = request.lambda * reg_value_dq(sample.e_est, sample.probe_dt, squared);
        let zero = vec![0.0; z0.len()];
        let ubar = step_backward(&f, tab, &sample.probe, &zero, w, atol, rtol, &mut grads);
        meter.release(sample.retained_buffers());
        if !request.reg.detach_state && ubar.iter().any(|&v| v != 0.0) {
            match (&sol, seeds.as_mut()) {
                (Some(sol), Some(seeds)) => {
                    let j = bracket(sol, t_reg)?;
                    let h = sol.t[j + 1] - sol.t[j];
                    let hw = hermite_weights((t_reg - sol.t[j]) / h);
                    seeds.add_knot_state(j, &ubar, hw[0]);
                    seeds.add_knot_deriv(j, &ubar, hw[1] * h);
                    seeds.add_knot_state(j + 1, &ubar, hw[2]);
                    seeds.add_knot_deriv(j + 1, &ubar, hw[3] * h);
                }
                _ => jumps.push((t_reg, ubar)),
            }
        }
    }

    let nfe_backward = match (&sol, &seeds) {
        (Some(sol), Some(seeds)) => {
            discrete_backprop_seeded(&f, tab, sol, seeds, atol, rtol, &mut grads)?;
            0
        }
        _ => {
            let out = backsolve_adjoint(&f, &z1, tspan, &zbar1, &jumps, tab, opts)?;
            meter.hold(out.retained_buffers);
            for (g, v) in grads.iter_mut().zip(&out.grad_params) {
                *g += v;
            }
            out.nfe
        }
    };
    let (nfe_forward, accepted_steps, rejected_steps) = fwd;

    Ok(ItemGradient {
        grads,
        task_loss,
        reg_value,
        correct: argmax(&logits) == label,
        nfe_forward,
        nfe_probe,
        nfe_backward,
        accepted_steps,
        rejected_steps,
        t_reg: t_reg_out,
        probe_dt: probe_dt_out,
        peak_buffers: meter.peak(),
    })
}

/// Batch-mean gradient and metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    pub grads: Vec<f64>,
    pub task_loss: f64,
    pub reg_value: f64,
    pub correct: usize,
    pub items: usize,
    pub nfe_forward: usize,
    pub nfe_probe: usize,
    pub nfe_backward: usize,
    pub probe_dt_mean: Option<f64>,
    pub peak_buffers: usize,
}

/// Mean of [`item_gradient`] over a batch. Items run in parallel on the
/// current rayon pool and are reduced in index order, so the result does not
/// depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn grad_total_loss(
    model: &NeuralOdeClassifier,
    params: &ModelParams,
    inputs: &[&[f64]],
    labels: &[usize],
    request: &GradientRequest,
    tab: &Tableau,
    opts: &SolverOptions,
    tspan: (f64, f64),
    item_seeds: &[u64],
) -> Result<BatchGradient> {
    if inputs.is_empty() || inputs.len() != labels.len() || inputs.len() != item_seeds.len() {
        return Err(Error::Shape(
            "batch inputs, labels and seeds must have equal non-zero length".into(),
        ));
    }
    check_combination(request.reg.mode, request.sensitivity)?;
    let items: Vec<Result<ItemGradient>> = (0..inputs.len())
        .into_par_iter()
        .map(|i| {
            item_gradient(
                model,
                params,
                inputs[i],
                labels[i],
                request,
                tab,
                opts,
                tspan,
                item_seeds[i],
            )
        })
        .collect();

    let n = inputs.len();
    let mut out = BatchGradient {
        grads: vec![0.0; params.len()],
        task_loss: 0.0,
        reg_value: 0.0,
        correct: 0,
        items: n,
        nfe_forward: 0,
        nfe_probe: 0,
        nfe_backward: 0,
        probe_dt_mean: None,
        peak_buffers: 0,
    };
    let mut probe_sum = 0.0;
    let mut probes = 0usize;
    for item in items {
        let item = item?;
        for (g, v) in out.grads.iter_mut().zip(&item.grads) {
            *g += v;
        }
        out.task_loss += item.task_loss;
        out.reg_value += item.reg_value;
        out.correct += usize::from(item.correct);
        out.nfe_forward += item.nfe_forward;
        out.nfe_probe += item.nfe_probe;
        out.nfe_backward += item.nfe_backward;
        out.peak_buffers = out.peak_buffers.max(item.peak_buffers);
        if let Some(dt) = item.probe_dt {
            probe_sum += dt;
            probes += 1;
        }
    }
    let inv = 1.0 / n as f64;
    for g in &mut out.grads {
        *g *= inv;
    }
    out.task_loss *= inv;
    out.reg_value *= inv;
    out.probe_dt_mean = (probes > 0).then(|| probe_sum / probes as f64);
    if out.grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("batch gradient is not finite".into()));
    }
    Ok(out)
}

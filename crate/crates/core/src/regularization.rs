//! Error-estimate regularizers: the global sum over all accepted steps and
//! the local single-probe estimate at a randomly drawn time.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{
    hermite_segment, initial_dt, interpolate, rk_step, Dynamics, SolutionTrajectory, SolverOptions,
    StepOutcome, Tableau,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegMode {
    #[default]
    None,
    Global,
    LocalUnbiased,
    LocalBiased,
}

impl RegMode {
    pub const ALL: [RegMode; 4] = [
        RegMode::None,
        RegMode::Global,
        RegMode::LocalUnbiased,
        RegMode::LocalBiased,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegMode::None => "none",
            RegMode::Global => "global",
            RegMode::LocalUnbiased => "local-unbiased",
            RegMode::LocalBiased => "local-biased",
        }
    }

    pub fn is_local(self) -> bool {
        matches!(self, RegMode::LocalUnbiased | RegMode::LocalBiased)
    }
}

impl fmt::Display for RegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown regularization mode {s:?}; expected none, global, local-unbiased or local-biased"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub mode: RegMode,
    /// Treat the interpolated probe state as a constant.
    pub detach_state: bool,
    /// Use `(q·|dt|)²` instead of `q·|dt|`.
    pub squared: bool,
}

/// `t_reg ~ U[t0, t1)`.
pub fn sample_unbiased<R: Rng + ?Sized>(tspan: (f64, f64), rng: &mut R) -> Result<f64> {
    let (t0, t1) = tspan;
    if !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::Domain(format!(
            "cannot sample from span [{t0}, {t1})"
        )));
    }
    loop {
        let t = t0 + (t1 - t0) * rng.gen::<f64>();
        if t < t1 {
            return Ok(t);
        }
    }
}

/// Uniform draw among the accepted step start times `t_0 .. t_{n-1}`.
///
/// Drawn by [`Reservoir`] so that a solve which keeps no knots makes the
/// same choice from the same RNG stream.
pub fn sample_biased<R: Rng + ?Sized>(sol: &SolutionTrajectory, rng: &mut R) -> Result<f64> {
    if sol.t.len() < 2 {
        return Err(Error::Domain(
            "trajectory has no accepted steps to sample from".into(),
        ));
    }
    let mut reservoir = Reservoir::default();
    let mut pick = sol.t[0];
    for &t in &sol.t[..sol.t.len() - 1] {
        if reservoir.offer(rng) {
            pick = t;
        }
    }
    Ok(pick)
}

/// Size-one reservoir sampling: after `k` offers, each one is held with
/// probability `1/k`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Reservoir {
    seen: usize,
}

impl Reservoir {
    /// Whether the new item replaces the held one.
    pub fn offer<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        self.seen += 1;
        self.seen == 1 || rng.gen_range(0..self.seen) == 0
    }
}

/// Picks the probe point while a solve streams past, for solvers that keep
/// no knots. Agrees with [`sample_biased`] and [`interpolate`] run on the
/// stored trajectory.
#[derive(Clone, Debug)]
pub struct ProbeTracker<R> {
    rng: R,
    biased: bool,
    reservoir: Reservoir,
    t_reg: f64,
    u: Option<Vec<f64>>,
}

impl<R: Rng> ProbeTracker<R> {
    /// For the unbiased mode `t_reg` is drawn immediately from `rng`.
    pub fn new(mode: RegMode, tspan: (f64, f64), mut rng: R) -> Result<Self> {
        let (biased, t_reg) = match mode {
            RegMode::LocalUnbiased => (false, sample_unbiased(tspan, &mut rng)?),
            RegMode::LocalBiased => (true, tspan.0),
            m => return Err(Error::Config(format!("mode {m} has no local probe"))),
        };
        Ok(Self {
            rng,
            biased,
            reservoir: Reservoir::default(),
            t_reg,
            u: None,
        })
    }

    /// Feed one accepted step from `(step.t, step.z)` to `(t_next, z_next)`.
    pub fn observe(&mut self, step: &StepOutcome, t_next: f64, f_next: &[f64]) {
        if self.biased {
            if self.reservoir.offer(&mut self.rng) {
                self.t_reg = step.t;
                self.u = Some(step.z.clone());
            }
        } else if self.u.is_none() && self.t_reg >= step.t && self.t_reg < t_next {
            self.u = Some(hermite_segment(
                (step.t, &step.z, &step.stages[0]),
                (t_next, &step.z_next, f_next),
                self.t_reg,
            ));
        }
    }

    /// `(t_reg, z(t_reg))` once the solve has finished.
    pub fn finish(self) -> Result<(f64, Vec<f64>)> {
        let t_reg = self.t_reg;
        self.u
            .map(|u| (t_reg, u))
            .ok_or_else(|| Error::Domain(format!("solve never reached t_reg = {t_reg}")))
    }
}

/// `q·|dt|`, or its square.
pub fn reg_value(q: f64, dt: f64, squared: bool) -> f64 {
    let r = q * dt.abs();
    if squared {
        r * r
    } else {
        r
    }
}

/// `∂ reg_value / ∂q` with `dt` held fixed.
pub fn reg_value_dq(q: f64, dt: f64, squared: bool) -> f64 {
    if squared {
        2.0 * q * dt * dt
    } else {
        dt.abs()
    }
}

/// One local probe: the dense-output state at `t_reg`, the step tried from
/// there and its regularization value.
#[derive(Clone, Debug, PartialEq)]
pub struct RegSample {
    pub t_reg: f64,
    pub u: Vec<f64>,
    pub probe_dt: f64,
    pub probe: StepOutcome,
    /// Scaled error norm of the probe step.
    pub e_est: f64,
    pub value: f64,
    pub nfe: usize,
}

impl RegSample {
    pub fn retained_buffers(&self) -> usize {
        self.probe.retained_buffers() + 1
    }
}

/// Local error estimate at `t_reg`: interpolate `u = z(t_reg)`, choose a
/// trial step with the startup heuristic (capped at the remaining span) and
/// take one step from `(t_reg, u)`.
pub fn local_reg_term(
    f: &dyn Dynamics,
    sol: &SolutionTrajectory,
    t_reg: f64,
    tab: &Tableau,
    opts: &SolverOptions,
    squared: bool,
) -> Result<RegSample> {
    let t_end = sol.t_end();
    if !(t_reg >= sol.t0() && t_reg < t_end) {
        return Err(Error::Domain(format!(
            "t_reg = {t_reg} outside [{}, {t_end})",
            sol.t0()
        )));
    }
    let u = interpolate(sol, t_reg)?;
    probe_at(f, t_reg, u, t_end, tab, opts, squared)
}

/// The probe step of [`local_reg_term`] from a known state `u = z(t_reg)`;
/// `t_end` caps the trial step.
pub fn probe_at(
    f: &dyn Dynamics,
    t_reg: f64,
    u: Vec<f64>,
    t_end: f64,
    tab: &Tableau,
    opts: &SolverOptions,
    squared: bool,
) -> Result<RegSample> {
    if !(t_reg < t_end) {
        return Err(Error::Domain(format!(
            "t_reg = {t_reg} not before the end time {t_end}"
        )));
    }
    let init = initial_dt(f, t_reg, &u, tab.order, opts.atol, opts.rtol)?;
    let probe_dt = init.dt.min(t_end - t_reg);
    let mut probe = rk_step(f, tab, t_reg, &u, probe_dt, Some(&init.f0))?;
    let e_est = probe.assess(opts.atol, opts.rtol);
    if !e_est.is_finite() {
        return Err(Error::Numeric(format!(
            "probe error estimate at t = {t_reg} is not finite"
        )));
    }
    let nfe = init.nfe + probe.nfe;
    Ok(RegSample {
        t_reg,
        u,
        probe_dt,
        value: reg_value(e_est, probe_dt, squared),
        e_est,
        probe,
        nfe,
    })
}

/// `Σ_j q_j·|dt_j|` over accepted steps. Needs the recorded stages, since
/// differentiating it runs through every step.
pub fn global_reg_term(sol: &SolutionTrajectory, squared: bool) -> Result<f64> {
    let records = sol
        .stage_records
        .as_ref()
        .ok_or_else(|| Error::State("global regularization needs recorded stages".into()))?;
    Ok(records.iter().map(|r| reg_value(r.q, r.dt, squared)).sum())
}

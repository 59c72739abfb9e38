use serde::{Deserialize, Serialize};

use crate::error::SolverError;
use crate::ode::controller::{initial_dt, pi_new_dt};
use crate::ode::dynamics::Dynamics;
use crate::ode::options::SolverOptions;
use crate::ode::step::{rk_step, StepOutcome};
use crate::ode::tableau::Tableau;

/// Accepted knots of a solve plus per-step instrumentation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolutionTrajectory {
    pub t: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    /// `f(t_j, z_j)` at every knot, used for dense output.
    pub f_knots: Vec<Vec<f64>>,
    /// Scaled error norm `q` of each accepted step.
    pub e_est_per_step: Vec<f64>,
    pub dt_per_step: Vec<f64>,
    pub nfe: usize,
    pub rejected_steps: usize,
    /// Accepted step records, kept only when requested.
    pub stage_records: Option<Vec<StepOutcome>>,
}

impl SolutionTrajectory {
    fn start(t0: f64, z0: &[f64], record_stages: bool) -> Self {
        Self {
            t: vec![t0],
            z: vec![z0.to_vec()],
            stage_records: record_stages.then(Vec::new),
            ..Self::default()
        }
    }

    pub fn accepted_steps(&self) -> usize {
        self.t.len().saturating_sub(1)
    }

    pub fn t0(&self) -> f64 {
        self.t[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.t.last().expect("trajectory has at least one knot")
    }

    pub fn final_state(&self) -> &[f64] {
        self.z.last().expect("trajectory has at least one knot")
    }

    /// State-sized buffers held: knot states, knot derivatives and any
    /// retained step records.
    pub fn retained_buffers(&self) -> usize {
        self.z.len()
            + self.f_knots.len()
            + self
                .stage_records
                .as_ref()
                .map_or(0, |r| r.iter().map(StepOutcome::retained_buffers).sum())
    }

    fn push_step(&mut self, outcome: StepOutcome, t_next: f64, f_next: Vec<f64>) {
        if self.f_knots.is_empty() {
            self.f_knots.push(outcome.stages[0].clone());
        }
        self.t.push(t_next);
        self.z.push(outcome.z_next.clone());
        self.f_knots.push(f_next);
        self.e_est_per_step.push(outcome.q);
        self.dt_per_step.push(outcome.dt);
        if let Some(records) = self.stage_records.as_mut() {
            records.push(outcome);
        }
    }
}

fn stage_failure_nfe(stage: usize, reused_k1: bool) -> usize {
    stage + 1 - usize::from(reused_k1)
}

/// Knot derivative at the end of an accepted step: the last stage for FSAL
/// tableaux, one extra evaluation otherwise.
fn end_derivative(
    f: &dyn Dynamics,
    tab: &Tableau,
    outcome: &StepOutcome,
    t_next: f64,
    nfe: &mut usize,
) -> Result<Vec<f64>, SolverError> {
    if tab.fsal {
        return Ok(outcome.stages[tab.stages() - 1].clone());
    }
    let mut k = vec![0.0; outcome.z_next.len()];
    f.eval(t_next, &outcome.z_next, &mut k);
    *nfe += 1;
    if k.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteDerivative { t: t_next });
    }
    Ok(k)
}

/// Receiver of accepted steps during an adaptive solve.
trait StepSink {
    fn push_step(&mut self, outcome: StepOutcome, t_next: f64, f_next: Vec<f64>);
    fn accepted_steps(&self) -> usize;
    fn add_nfe(&mut self, n: usize);
    fn add_rejection(&mut self);
    fn take_partial(&mut self) -> SolutionTrajectory;
}

impl StepSink for SolutionTrajectory {
    fn push_step(&mut self, outcome: StepOutcome, t_next: f64, f_next: Vec<f64>) {
        SolutionTrajectory::push_step(self, outcome, t_next, f_next)
    }
    fn accepted_steps(&self) -> usize {
        SolutionTrajectory::accepted_steps(self)
    }
    fn add_nfe(&mut self, n: usize) {
        self.nfe += n;
    }
    fn add_rejection(&mut self) {
        self.rejected_steps += 1;
    }
    fn take_partial(&mut self) -> SolutionTrajectory {
        std::mem::take(self)
    }
}

/// Final state of a solve that keeps no intermediate knots.
#[derive(Clone, Debug, PartialEq)]
pub struct Endpoint {
    pub t: f64,
    pub z: Vec<f64>,
    pub nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Endpoint {
    /// State-sized buffers live during the solve: the running state, the
    /// carried derivative and one step record.
    pub fn working_buffers(tab: &Tableau) -> usize {
        tab.stages() + 6
    }
}

impl StepSink for Endpoint {
    fn push_step(&mut self, outcome: StepOutcome, t_next: f64, _f_next: Vec<f64>) {
        self.t = t_next;
        self.z = outcome.z_next;
        self.accepted_steps += 1;
    }
    fn accepted_steps(&self) -> usize {
        self.accepted_steps
    }
    fn add_nfe(&mut self, n: usize) {
        self.nfe += n;
    }
    fn add_rejection(&mut self) {
        self.rejected_steps += 1;
    }
    fn take_partial(&mut self) -> SolutionTrajectory {
        SolutionTrajectory {
            t: vec![self.t],
            z: vec![self.z.clone()],
            nfe: self.nfe,
            rejected_steps: self.rejected_steps,
            ..SolutionTrajectory::default()
        }
    }
}

/// Adaptive integration of `dz/dt = f(t, z)` over `tspan`.
///
/// Steps with `q < 1` are accepted; every attempt, the startup heuristic
/// and any extra knot-derivative evaluations are counted in `nfe`.
pub fn solve_adaptive(
    f: &dyn Dynamics,
    z0: &[f64],
    tspan: (f64, f64),
    tab: &Tableau,
    opts: &SolverOptions,
    record_stages: bool,
) -> Result<SolutionTrajectory, SolverError> {
    let mut sol = SolutionTrajectory::start(tspan.0, z0, record_stages);
    integrate(f, z0, tspan, tab, opts, &mut sol)?;
    Ok(sol)
}

/// Same controller as [`solve_adaptive`] but only the running state is kept.
pub fn solve_endpoint(
    f: &dyn Dynamics,
    z0: &[f64],
    tspan: (f64, f64),
    tab: &Tableau,
    opts: &SolverOptions,
) -> Result<Endpoint, SolverError> {
    solve_endpoint_observed(f, z0, tspan, tab, opts, &mut |_, _, _| {})
}

/// [`solve_endpoint`] that shows every accepted step, with its end time and
/// end derivative, to `on_step` before discarding it.
pub fn solve_endpoint_observed(
    f: &dyn Dynamics,
    z0: &[f64],
    tspan: (f64, f64),
    tab: &Tableau,
    opts: &SolverOptions,
    on_step: &mut dyn FnMut(&StepOutcome, f64, &[f64]),
) -> Result<Endpoint, SolverError> {
    let mut sink = Observed {
        end: Endpoint {
            t: tspan.0,
            z: z0.to_vec(),
            nfe: 0,
            accepted_steps: 0,
            rejected_steps: 0,
        },
        on_step,
    };
    integrate(f, z0, tspan, tab, opts, &mut sink)?;
    Ok(sink.end)
}

struct Observed<'a> {
    end: Endpoint,
    on_step: &'a mut dyn FnMut(&StepOutcome, f64, &[f64]),
}

impl StepSink for Observed<'_> {
    fn push_step(&mut self, outcome: StepOutcome, t_next: f64, f_next: Vec<f64>) {
        (self.on_step)(&outcome, t_next, &f_next);
        self.end.push_step(outcome, t_next, f_next);
    }
    fn accepted_steps(&self) -> usize {
        self.end.accepted_steps
    }
    fn add_nfe(&mut self, n: usize) {
        self.end.nfe += n;
    }
    fn add_rejection(&mut self) {
        self.end.rejected_steps += 1;
    }
    fn take_partial(&mut self) -> SolutionTrajectory {
        self.end.take_partial()
    }
}

fn integrate<S: StepSink>(
    f: &dyn Dynamics,
    z0: &[f64],
    tspan: (f64, f64),
    tab: &Tableau,
    opts: &SolverOptions,
    sink: &mut S,
) -> Result<(), SolverError> {
    let (t0, t1) = tspan;
    if !(t0 < t1) {
        return Err(SolverError::InvalidSpan { t0, t1 });
    }
    opts.validate()?;

    let init = initial_dt(f, t0, z0, tab.order, opts.atol, opts.rtol)?;
    sink.add_nfe(init.nfe);
    let mut dt = init.dt.clamp(opts.dt_min, opts.dt_max);

    let mut t = t0;
    let mut z = z0.to_vec();
    let mut k1: Option<Vec<f64>> = None;
    let mut q_prev = 1.0;

    while t < t1 {
        if sink.accepted_steps() >= opts.max_steps {
            let partial = sink.take_partial();
            return Err(SolverError::MaxSteps {
                max_steps: opts.max_steps,
                partial: Box::new(partial),
            });
        }
        let mut rejections = 0;
        loop {
            let last = t + dt * (1.0 + 1e-8) >= t1;
            let step_dt = if last { t1 - t } else { dt };
            let attempt = rk_step(f, tab, t, &z, step_dt, k1.as_deref());
            let (q, outcome) = match attempt {
                Ok(mut out) => {
                    sink.add_nfe(out.nfe);
                    let q = out.assess(opts.atol, opts.rtol);
                    (q, Some(out))
                }
                Err(SolverError::NonFiniteStage { stage, .. }) => {
                    sink.add_nfe(stage_failure_nfe(stage, k1.is_some()));
                    if stage == 0 {
                        return Err(SolverError::NonFiniteDerivative { t });
                    }
                    (f64::INFINITY, None)
                }
                Err(e) => return Err(e),
            };

            let outcome = match outcome {
                Some(out) if out.accepted => {
                    let t_next = if last { t1 } else { t + step_dt };
                    let mut nfe = 0;
                    let f_next = end_derivative(f, tab, &out, t_next, &mut nfe)?;
                    sink.add_nfe(nfe);
                    let proposed = pi_new_dt(q, q_prev, step_dt, opts, tab.order);
                    q_prev = q;
                    z.clone_from(&out.z_next);
                    k1 = Some(f_next.clone());
                    sink.push_step(out, t_next, f_next);
                    t = t_next;
                    // a truncated final step says nothing about the natural step size
                    dt = if last { dt } else { proposed };
                    break;
                }
                other => other,
            };

            sink.add_rejection();
            rejections += 1;
            if step_dt <= opts.dt_min || rejections > opts.max_rejections_per_step {
                return Err(SolverError::StepFailure { t, dt: step_dt, q });
            }
            if k1.is_none() {
                // the failed attempt already evaluated f(t, z) as its first stage
                k1 = outcome.map(|o| o.stages.into_iter().next().expect("at least one stage"));
            }
            dt = pi_new_dt(q, q_prev, step_dt, opts, tab.order).min(step_dt * 0.9);
        }
    }
    Ok(())
}

/// Integrate with a prescribed step sequence, no acceptance test.
///
/// The startup heuristic still runs so the evaluation count matches an
/// adaptive solve: `2 + s + (n - 1)(s - 1)` for an FSAL tableau.
pub fn solve_fixed(
    f: &dyn Dynamics,
    z0: &[f64],
    t0: f64,
    dts: &[f64],
    tab: &Tableau,
    opts: &SolverOptions,
    record_stages: bool,
) -> Result<SolutionTrajectory, SolverError> {
    let mut sol = SolutionTrajectory::start(t0, z0, record_stages);
    let init = initial_dt(f, t0, z0, tab.order, opts.atol, opts.rtol)?;
    sol.nfe += init.nfe;
    let mut t = t0;
    let mut z = z0.to_vec();
    let mut k1: Option<Vec<f64>> = None;
    for &dt in dts {
        let mut out = rk_step(f, tab, t, &z, dt, k1.as_deref())?;
        sol.nfe += out.nfe;
        out.assess(opts.atol, opts.rtol);
        let t_next = t + dt;
        let f_next = end_derivative(f, tab, &out, t_next, &mut sol.nfe)?;
        z.clone_from(&out.z_next);
        k1 = Some(f_next.clone());
        sol.push_step(out, t_next, f_next);
        t = t_next;
    }
    Ok(sol)
}

/// [`solve_fixed`] with `n` equal steps across `tspan`, landing exactly on `t1`.
pub fn solve_fixed_uniform(
    f: &dyn Dynamics,
    z0: &[f64],
    tspan: (f64, f64),
    n: usize,
    tab: &Tableau,
    opts: &SolverOptions,
    record_stages: bool,
) -> Result<SolutionTrajectory, SolverError> {
    let (t0, t1) = tspan;
    if !(t0 < t1) || n == 0 {
        return Err(SolverError::InvalidSpan { t0, t1 });
    }
    let dt = (t1 - t0) / n as f64;
    let mut sol = solve_fixed(f, z0, t0, &vec![dt; n], tab, opts, record_stages)?;
    *sol.t.last_mut().unwrap() = t1;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::dynamics::{FnDynamics, Zero};

    fn decay() -> FnDynamics<impl Fn(f64, &[f64], &mut [f64]) + Sync> {
        FnDynamics::new(1, |_, z: &[f64], out: &mut [f64]| out[0] = -z[0])
    }

    fn growth() -> FnDynamics<impl Fn(f64, &[f64], &mut [f64]) + Sync> {
        FnDynamics::new(1, |_, z: &[f64], out: &mut [f64]| out[0] = z[0])
    }

    #[test]
    fn endpoint_matches_full_solve() {
        let tab = Tableau::tsit5();
        let opts = SolverOptions::with_tolerances(1e-7, 1e-7);
        let full = solve_adaptive(&growth(), &[1.0], (0.0, 1.5), &tab, &opts, false).unwrap();
        let end = solve_endpoint(&growth(), &[1.0], (0.0, 1.5), &tab, &opts).unwrap();
        assert_eq!(end.z, full.final_state());
        assert_eq!(end.nfe, full.nfe);
        assert_eq!(end.accepted_steps, full.accepted_steps());
        assert_eq!(end.t, 1.5);
    }

    #[test]
    fn zero_dynamics_two_knots() {
        let sol = solve_adaptive(
            &Zero { dim: 2 },
            &[1.0, 2.0],
            (0.0, 1.0),
            &Tableau::tsit5(),
            &SolverOptions::default(),
            false,
        )
        .unwrap();
        assert_eq!(sol.t, vec![0.0, 1.0]);
        assert_eq!(sol.z[1], vec![1.0, 2.0]);
        assert_eq!(sol.rejected_steps, 0);
        assert_eq!(sol.nfe, 2 + 7);
    }

    #[test]
    fn exp_decay_tight_tolerance() {
        let sol = solve_adaptive(
            &decay(),
            &[1.0],
            (0.0, 1.0),
            &Tableau::tsit5(),
            &SolverOptions::with_tolerances(1e-8, 1e-8),
            false,
        )
        .unwrap();
        assert_eq!(sol.t_end(), 1.0);
        assert!((sol.final_state()[0] - 0.367_879_441_171_442_3).abs() < 1e-7);
    }

    #[test]
    fn tighter_tolerance_takes_more_steps() {
        let tab = Tableau::tsit5();
        let loose = solve_adaptive(
            &growth(),
            &[1.0],
            (0.0, 1.0),
            &tab,
            &SolverOptions::with_tolerances(1e-4, 1e-4),
            false,
        )
        .unwrap();
        let tight = solve_adaptive(
            &growth(),
            &[1.0],
            (0.0, 1.0),
            &tab,
            &SolverOptions::with_tolerances(1e-10, 1e-10),
            false,
        )
        .unwrap();
        assert!(tight.accepted_steps() > loose.accepted_steps());
    }

    #[test]
    fn trajectory_invariants() {
        let f = FnDynamics::new(2, |t, z: &[f64], out: &mut [f64]| {
            out[0] = z[1];
            out[1] = -z[0] + (3.0 * t).sin();
        });
        let tab = Tableau::tsit5();
        let sol = solve_adaptive(
            &f,
            &[1.0, 0.0],
            (0.0, 6.0),
            &tab,
            &SolverOptions::with_tolerances(1e-7, 1e-7),
            true,
        )
        .unwrap();
        assert!(sol.t.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sol.z.len(), sol.t.len());
        assert_eq!(sol.f_knots.len(), sol.t.len());
        assert_eq!(sol.e_est_per_step.len(), sol.t.len() - 1);
        assert!(sol.e_est_per_step.iter().all(|&q| q < 1.0));
        assert!(sol.nfe >= sol.accepted_steps() * (tab.stages() - 1));
        let records = sol.stage_records.as_ref().unwrap();
        assert_eq!(records.len(), sol.accepted_steps());
        assert!(records.iter().all(|r| r.accepted));
        let dt_sum: f64 = sol.dt_per_step.iter().sum();
        assert!((dt_sum - 6.0).abs() < 1e-12);
    }

    #[test]
    fn stage_records_only_on_request() {
        let sol = solve_adaptive(
            &decay(),
            &[1.0],
            (0.0, 1.0),
            &Tableau::tsit5(),
            &SolverOptions::default(),
            false,
        )
        .unwrap();
        assert!(sol.stage_records.is_none());
    }

    #[test]
    fn fixed_step_evaluation_count() {
        let tab = Tableau::tsit5();
        for n in [1usize, 2, 7, 20] {
            let sol = solve_fixed_uniform(
                &decay(),
                &[1.0],
                (0.0, 1.0),
                n,
                &tab,
                &SolverOptions::default(),
                false,
            )
            .unwrap();
            assert_eq!(sol.nfe, 2 + 7 + (n - 1) * 6);
            assert_eq!(sol.t_end(), 1.0);
        }
    }

    #[test]
    fn rejections_shrink_the_step() {
        // stiff-ish decay forces rejections from the first guess
        let f = FnDynamics::new(1, |t, z: &[f64], out: &mut [f64]| {
            out[0] = -50.0 * (z[0] - t.cos())
        });
        let sol = solve_adaptive(
            &f,
            &[0.0],
            (0.0, 1.0),
            &Tableau::bs3(),
            &SolverOptions::with_tolerances(1e-3, 1e-3),
            true,
        )
        .unwrap();
        assert!(sol.e_est_per_step.iter().all(|&q| q < 1.0));
        assert_eq!(sol.t_end(), 1.0);
    }

    #[test]
    fn max_steps_returns_partial() {
        let opts = SolverOptions {
            max_steps: 3,
            ..SolverOptions::with_tolerances(1e-10, 1e-10)
        };
        match solve_adaptive(
            &growth(),
            &[1.0],
            (0.0, 1.0),
            &Tableau::tsit5(),
            &opts,
            false,
        ) {
            Err(SolverError::MaxSteps { partial, .. }) => assert_eq!(partial.accepted_steps(), 3),
            other => panic!("expected max-steps error, got {other:?}"),
        }
    }

    #[test]
    fn step_failure_when_dt_min_reached() {
        let f = FnDynamics::new(1, |_, z: &[f64], out: &mut [f64]| {
            out[0] = if z[0] > 1.2 { f64::NAN } else { z[0] * 40.0 }
        });
        let opts = SolverOptions {
            dt_min: 1e-3,
            ..SolverOptions::default()
        };
        let err =
            solve_adaptive(&f, &[1.0], (0.0, 1.0), &Tableau::tsit5(), &opts, false).unwrap_err();
        assert!(matches!(err, SolverError::StepFailure { .. }));
    }

    #[test]
    fn invalid_span() {
        let err = solve_adaptive(
            &decay(),
            &[1.0],
            (1.0, 1.0),
            &Tableau::tsit5(),
            &SolverOptions::default(),
            false,
        )
        .unwrap_err();
        assert!(matches!(err, SolverError::InvalidSpan { .. }));
    }

    #[test]
    fn deterministic() {
        let tab = Tableau::tsit5();
        let opts = SolverOptions::with_tolerances(1e-6, 1e-6);
        let a = solve_adaptive(&growth(), &[1.0], (0.0, 2.0), &tab, &opts, true).unwrap();
        let b = solve_adaptive(&growth(), &[1.0], (0.0, 2.0), &tab, &opts, true).unwrap();
        assert_eq!(a, b);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::SolverError;
use crate::ode::dynamics::Dynamics;
use crate::ode::tableau::Tableau;

/// One attempted Runge-Kutta step together with everything needed to
/// differentiate through it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub t: f64,
    pub dt: f64,
    /// State at the start of the step.
    pub z: Vec<f64>,
    pub z_next: Vec<f64>,
    pub z_tilde: Vec<f64>,
    /// `dt · Σ (b̃ᵢ - bᵢ) kᵢ`
    pub err: Vec<f64>,
    pub stages: Vec<Vec<f64>>,
    /// Scaled error norm; `INFINITY` until assessed.
    pub q: f64,
    pub accepted: bool,
    /// Dynamics evaluations spent on this attempt.
    pub nfe: usize,
}

impl StepOutcome {
    /// Compute `q` against the tolerances and set the acceptance flag.
    pub fn assess(&mut self, atol: f64, rtol: f64) -> f64 {
        self.q = error_norm(&self.err, &self.z, &self.z_next, atol, rtol);
        self.accepted = self.q < 1.0;
        self.q
    }

    /// State-sized buffers held by this record.
    pub fn retained_buffers(&self) -> usize {
        self.stages.len() + 4
    }

    /// Stage input `z + dt Σ_{j<i} a_ij k_j` for stage `i`.
    pub fn stage_input(&self, tab: &Tableau, i: usize) -> Vec<f64> {
        stage_input(tab, &self.z, self.dt, &self.stages, i)
    }
}

pub(crate) fn stage_input(
    tab: &Tableau,
    z: &[f64],
    dt: f64,
    stages: &[Vec<f64>],
    i: usize,
) -> Vec<f64> {
    let mut y = z.to_vec();
    for (j, kj) in stages.iter().enumerate().take(i) {
        let a = tab.a[i][j];
        if a != 0.0 {
            let w = dt * a;
            for (yi, kji) in y.iter_mut().zip(kj) {
                *yi += w * kji;
            }
        }
    }
    y
}

/// Advance one explicit step of size `dt` from `(t, z)`.
///
/// `k1_in`, when given, must equal `f(t, z)` and saves one evaluation.
pub fn rk_step(
    f: &dyn Dynamics,
    tab: &Tableau,
    t: f64,
    z: &[f64],
    dt: f64,
    k1_in: Option<&[f64]>,
) -> Result<StepOutcome, SolverError> {
    let s = tab.stages();
    let d = z.len();
    let mut stages: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut nfe = 0;

    let k1 = match k1_in {
        Some(k) => k.to_vec(),
        None => {
            let mut k = vec![0.0; d];
            f.eval(t, z, &mut k);
            nfe += 1;
            k
        }
    };
    if k1.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteStage { stage: 0, t });
    }
    stages.push(k1);

    let mut last_input = Vec::new();
    for i in 1..s {
        let y = stage_input(tab, z, dt, &stages, i);
        let mut k = vec![0.0; d];
        f.eval(t + tab.c[i] * dt, &y, &mut k);
        nfe += 1;
        if k.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFiniteStage { stage: i, t });
        }
        stages.push(k);
        if i == s - 1 {
            last_input = y;
        }
    }

    let combine = |w: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for (wi, ki) in w.iter().zip(&stages) {
            if *wi != 0.0 {
                for (o, kv) in out.iter_mut().zip(ki) {
                    *o += wi * kv;
                }
            }
        }
        out
    };

    let z_next = if tab.fsal && s > 1 {
        last_input
    } else {
        let inc = combine(&tab.b);
        z.iter().zip(&inc).map(|(zi, ii)| zi + dt * ii).collect()
    };
    let inc_tilde = combine(&tab.b_tilde);
    let z_tilde: Vec<f64> = z
        .iter()
        .zip(&inc_tilde)
        .map(|(zi, ii)| zi + dt * ii)
        .collect();
    let err: Vec<f64> = combine(&tab.b_err).into_iter().map(|e| dt * e).collect();

    Ok(StepOutcome {
        t,
        dt,
        z: z.to_vec(),
        z_next,
        z_tilde,
        err,
        stages,
        q: f64::INFINITY,
        accepted: false,
        nfe,
    })
}

/// RMS of `errᵢ / (atol + max(|z_prevᵢ|, |z_nextᵢ|)·rtol)`.
///
/// Non-finite inputs give `+∞`.
pub fn error_norm(err: &[f64], z_prev: &[f64], z_next: &[f64], atol: f64, rtol: f64) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..err.len() {
        let scale = atol + z_prev[i].abs().max(z_next[i].abs()) * rtol;
        let r = err[i] / scale;
        acc += r * r;
    }
    let q = (acc / err.len() as f64).sqrt();
    if q.is_finite() {
        q
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::dynamics::{FnDynamics, Zero};
    use proptest::prelude::*;

    #[test]
    fn zero_dynamics_step() {
        let out = rk_step(
            &Zero { dim: 2 },
            &Tableau::tsit5(),
            0.0,
            &[1.0, -3.0],
            0.5,
            None,
        )
        .unwrap();
        assert_eq!(out.z_next, vec![1.0, -3.0]);
        assert_eq!(out.z_tilde, vec![1.0, -3.0]);
        assert!(out.err.iter().all(|&e| e == 0.0));
        assert_eq!(out.nfe, 7);
    }

    #[test]
    fn constant_dynamics_is_exact() {
        let f = FnDynamics::new(1, |_, _, out: &mut [f64]| out[0] = 1.0);
        for tab in [Tableau::tsit5(), Tableau::bs3()] {
            let out = rk_step(&f, &tab, 0.0, &[2.0], 0.3, None).unwrap();
            assert!((out.z_next[0] - 2.3).abs() < 1e-14);
            assert!((out.z_tilde[0] - 2.3).abs() < 1e-14);
            assert!(out.err[0].abs() < 1e-15);
        }
    }

    #[test]
    fn exponential_growth_one_step() {
        let f = FnDynamics::new(1, |_, z: &[f64], out: &mut [f64]| out[0] = z[0]);
        let out = rk_step(&f, &Tableau::tsit5(), 0.0, &[1.0], 0.1, None).unwrap();
        assert!((out.z_next[0] - 1.105_170_918_075_647_7).abs() < 1e-9);
    }

    #[test]
    fn fsal_reuse_saves_one_evaluation() {
        let f = FnDynamics::new(1, |_, z: &[f64], out: &mut [f64]| out[0] = -z[0]);
        let tab = Tableau::tsit5();
        let a = rk_step(&f, &tab, 0.0, &[1.0], 0.1, None).unwrap();
        let b = rk_step(&f, &tab, 0.1, &a.z_next, 0.1, Some(&a.stages[6])).unwrap();
        assert_eq!(b.nfe, 6);
        let c = rk_step(&f, &tab, 0.1, &a.z_next, 0.1, None).unwrap();
        assert_eq!(b.z_next, c.z_next);
    }

    #[test]
    fn non_finite_stage_reports_index() {
        let f = FnDynamics::new(1, |t, _, out: &mut [f64]| {
            out[0] = if t > 0.05 { f64::NAN } else { 1.0 }
        });
        let err = rk_step(&f, &Tableau::tsit5(), 0.0, &[0.0], 0.1, None).unwrap_err();
        // c = 0.9 at stage index 3 is the first node past t = 0.05
        assert!(matches!(err, SolverError::NonFiniteStage { stage: 3, .. }));
    }

    #[test]
    fn error_norm_examples() {
        assert_eq!(error_norm(&[0.0], &[1.0], &[1.0], 1e-6, 1e-3), 0.0);
        assert!((error_norm(&[2e-6], &[5.0], &[5.0], 1e-6, 0.0) - 2.0).abs() < 1e-12);

        let (atol, rtol) = (1e-4, 1e-2);
        let err = [3e-4, -5e-3];
        let zp = [0.5, -20.0];
        let zn = [0.7, -10.0];
        let s0: f64 = 1e-4 + 0.7 * 1e-2;
        let s1: f64 = 1e-4 + 20.0 * 1e-2;
        let expected = (((3e-4 / s0).powi(2) + (5e-3 / s1).powi(2)) / 2.0).sqrt();
        assert!((error_norm(&err, &zp, &zn, atol, rtol) - expected).abs() < 1e-12);

        assert_eq!(
            error_norm(&[f64::NAN], &[0.0], &[0.0], 1e-6, 1e-6),
            f64::INFINITY
        );
    }

    proptest! {
        #[test]
        fn embedded_identity(z0 in -2.0f64..2.0, z1 in -2.0f64..2.0, dt in 0.01f64..0.5, w in -3.0f64..3.0) {
            let f = FnDynamics::new(2, move |t, z: &[f64], out: &mut [f64]| {
                out[0] = w * z[1] + t.sin();
                out[1] = -z[0] * z[0] + 0.3 * z[1];
            });
            let tab = Tableau::tsit5();
            let out = rk_step(&f, &tab, 0.2, &[z0, z1], dt, None).unwrap();
            for i in 0..2 {
                prop_assert!((out.z_tilde[i] - out.z_next[i] - out.err[i]).abs() < 1e-12);
            }
        }
    }
}

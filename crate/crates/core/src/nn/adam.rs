use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam optimizer state with bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self::with_hyperparams(num_params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(num_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// One Adam step applied to `params` in place.
    ///
    /// Non-finite gradients reject the step: neither the state nor the
    /// parameters are touched.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state holds {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient {i} is not finite")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::update`].
pub fn adam_update(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.update(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = AdamState::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 0.5];
        s.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn single_step_closed_form() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut s = AdamState::with_hyperparams(2, lr, b1, b2, eps);
        let g = [0.3, -4.0];
        let mut p = vec![1.0, 1.0];
        s.update(&mut p, &g).unwrap();
        for i in 0..2 {
            // m_hat = g, v_hat = g^2 after one corrected step
            let m_hat = ((1.0 - b1) * g[i]) / (1.0 - b1);
            let v_hat = ((1.0 - b2) * g[i] * g[i]) / (1.0 - b2);
            let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p[i] - expected).abs() < 1e-15);
            // magnitude close to lr, sign opposite to g
            assert!(((p[i] - 1.0) + lr * g[i].signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn two_step_recursion() {
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut s = AdamState::with_hyperparams(1, lr, b1, b2, eps);
        let g = 0.7;
        let mut p = vec![0.2];
        s.update(&mut p, &[g]).unwrap();
        s.update(&mut p, &[g]).unwrap();

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.2f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0] - x).abs() < 1e-12);
        assert!((s.m[0] - m).abs() < 1e-12 && (s.v[0] - v).abs() < 1e-12);
        assert_eq!(s.t, 2);
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut s = AdamState::new(2, 0.01);
        let mut p = vec![1.0, 2.0];
        s.update(&mut p, &[0.5, 0.5]).unwrap();
        let before = (s.clone(), p.clone());
        assert!(matches!(
            s.update(&mut p, &[f64::NAN, 0.0]),
            Err(Error::Numeric(_))
        ));
        assert_eq!((s, p), before);
    }

    #[test]
    fn length_mismatch() {
        let mut s = AdamState::new(2, 0.01);
        assert!(matches!(
            s.update(&mut [0.0, 0.0], &[1.0]),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn second_moment_stays_nonnegative(gs in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut s = AdamState::new(1, 0.01);
            let mut p = vec![0.0];
            for g in gs {
                s.update(&mut p, &[g]).unwrap();
                prop_assert!(s.v[0] >= 0.0);
            }
        }
    }
}

//! Neural ODE classifier: MLP dynamics on an optionally zero-augmented
//! state, followed by a linear head on the final state.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BackwardScratch, LayerShape, Mlp, ModelParams, Tape};
use crate::ode::{Differentiable, Dynamics};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Zero channels appended to the input to form the ODE state.
    pub augment_dim: usize,
    /// Hidden widths of the dynamics network.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralOdeClassifier {
    spec: ModelSpec,
    shapes: Vec<LayerShape>,
    dynamics: Mlp,
    head: Mlp,
}

impl NeuralOdeClassifier {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.input_dim == 0 || spec.num_classes < 2 {
            return Err(Error::Config(
                "model needs a non-empty input and at least two classes".into(),
            ));
        }
        let d = spec.input_dim + spec.augment_dim;
        let mut shapes = Vec::new();
        let mut prev = d + 1;
        for &h in &spec.hidden {
            if h == 0 {
                return Err(Error::Config("hidden widths must be positive".into()));
            }
            shapes.push(LayerShape::new(h, prev));
            prev = h;
        }
        shapes.push(LayerShape::new(d, prev));
        let dyn_layers = shapes.len();
        shapes.push(LayerShape::new(spec.num_classes, d));
        Ok(Self {
            spec,
            shapes,
            dynamics: Mlp::new(0, dyn_layers),
            head: Mlp::new(dyn_layers, 1),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn state_dim(&self) -> usize {
        self.spec.input_dim + self.spec.augment_dim
    }

    pub fn num_params(&self) -> usize {
        self.shapes.iter().map(LayerShape::len).sum()
    }

    pub fn dynamics_mlp(&self) -> Mlp {
        self.dynamics
    }

    pub fn head_mlp(&self) -> Mlp {
        self.head
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        ModelParams::init_uniform(&self.shapes, rng)
    }

    pub fn initial_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} input features, got {}",
                self.spec.input_dim,
                x.len()
            )));
        }
        let mut z = x.to_vec();
        z.resize(self.state_dim(), 0.0);
        Ok(z)
    }

    pub fn dynamics<'a>(&'a self, params: &'a ModelParams) -> OdeDynamics<'a> {
        OdeDynamics {
            mlp: self.dynamics,
            params,
            dim: self.state_dim(),
        }
    }

    pub fn logits(&self, params: &ModelParams, z_end: &[f64]) -> Result<Vec<f64>> {
        self.head.forward(params, z_end, None)
    }

    /// Backpropagate `dlogits` through the head: head parameter gradients are
    /// added into `grad_params`; the gradient w.r.t. `z_end` is returned.
    pub fn head_backward(
        &self,
        params: &ModelParams,
        z_end: &[f64],
        dlogits: &[f64],
        grad_params: &mut [f64],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        self.head.forward(params, z_end, Some(&mut tape))?;
        let mut zbar = vec![0.0; z_end.len()];
        tape.backward_accumulate(
            params,
            dlogits,
            &mut BackwardScratch::default(),
            grad_params,
            &mut [zbar.as_mut_slice()],
        )?;
        Ok(zbar)
    }
}

/// Softmax cross-entropy; returns the loss and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy is not finite".into()));
    }
    Ok((loss, grad))
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

thread_local! {
    static VJP_WORK: RefCell<(Tape, BackwardScratch, Vec<f64>)> = RefCell::new(Default::default());
}

/// `f_θ(z, t)` for one classifier's parameters.
#[derive(Clone, Copy)]
pub struct OdeDynamics<'a> {
    mlp: Mlp,
    params: &'a ModelParams,
    dim: usize,
}

impl<'a> OdeDynamics<'a> {
    pub fn new(mlp: Mlp, params: &'a ModelParams) -> Self {
        Self {
            mlp,
            params,
            dim: mlp.output_dim(params),
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }
}

impl Dynamics for OdeDynamics<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, z: &[f64], out: &mut [f64]) {
        VJP_WORK.with(|w| {
            let input = &mut w.borrow_mut().2;
            input.clear();
            input.extend_from_slice(z);
            input.push(t);
            self.mlp.eval_unchecked(self.params, input, out);
        })
    }
}

impl Differentiable for OdeDynamics<'_> {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn vjp(&self, t: f64, z: &[f64], w: &[f64], grad_z: &mut [f64], grad_params: &mut [f64]) {
        VJP_WORK.with(|cell| {
            let (tape, scratch, input) = &mut *cell.borrow_mut();
            input.clear();
            input.extend_from_slice(z);
            input.push(t);
            tape.clear();
            let x = tape.input(input);
            let mut gin = vec![0.0; z.len() + 1];
            self.mlp
                .record(self.params, tape, x)
                .and_then(|_| {
                    tape.backward_accumulate(
                        self.params,
                        w,
                        scratch,
                        grad_params,
                        &mut [gin.as_mut_slice()],
                    )
                })
                .expect("dynamics shapes are fixed at construction");
            grad_z.copy_from_slice(&gin[..z.len()]);
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_difference_grad_flat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> NeuralOdeClassifier {
        NeuralOdeClassifier::new(ModelSpec {
            input_dim: 2,
            augment_dim: 1,
            hidden: vec![6],
            num_classes: 3,
        })
        .unwrap()
    }

    #[test]
    fn shapes_and_state() {
        let m = model();
        assert_eq!(m.state_dim(), 3);
        assert_eq!(
            m.shapes(),
            &[
                LayerShape::new(6, 4),
                LayerShape::new(3, 6),
                LayerShape::new(3, 3)
            ]
        );
        assert_eq!(m.initial_state(&[0.5, -0.5]).unwrap(), vec![0.5, -0.5, 0.0]);
        assert!(m.initial_state(&[1.0]).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = [0.3, -1.2, 2.0];
        let (_, g) = softmax_cross_entropy(&logits, 1).unwrap();
        let fd =
            finite_difference_grad_flat(|l| softmax_cross_entropy(l, 1).unwrap().0, &logits, 1e-6)
                .unwrap();
        for i in 0..3 {
            assert!((g[i] - fd[i]).abs() < 1e-8);
        }
        assert!(softmax_cross_entropy(&logits, 3).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let m = model();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let f = m.dynamics(&p);
        let z = [0.2, -0.4, 0.9];
        let w = [1.0, -0.5, 0.25];
        let mut gz = vec![0.0; 3];
        let mut gp = vec![0.0; p.len()];
        f.vjp(0.3, &z, &w, &mut gz, &mut gp);
        let fd_z = finite_difference_grad_flat(
            |zz| {
                let mut out = [0.0; 3];
                f.eval(0.3, zz, &mut out);
                out.iter().zip(&w).map(|(a, b)| a * b).sum()
            },
            &z,
            1e-6,
        )
        .unwrap();
        for i in 0..3 {
            assert!((gz[i] - fd_z[i]).abs() < 1e-8);
        }
        // head parameters receive nothing from the dynamics
        let head_off = p.weight_offset(2);
        assert!(gp[head_off..].iter().all(|&g| g == 0.0));
    }
}

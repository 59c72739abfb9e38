use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ModelParams;
use crate::nn::tape::{dot, NodeId, Tape};

/// A stack of dense layers `first_layer .. first_layer + num_layers` inside a
/// [`ModelParams`]. Hidden layers use tanh, the output layer is linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub first_layer: usize,
    pub num_layers: usize,
}

impl Mlp {
    pub fn new(first_layer: usize, num_layers: usize) -> Self {
        Self {
            first_layer,
            num_layers,
        }
    }

    fn layers(&self) -> std::ops::Range<usize> {
        self.first_layer..self.first_layer + self.num_layers
    }

    fn last_layer(&self) -> usize {
        self.first_layer + self.num_layers - 1
    }

    pub fn input_dim(&self, params: &ModelParams) -> usize {
        params.shapes()[self.first_layer].cols
    }

    pub fn output_dim(&self, params: &ModelParams) -> usize {
        params.shapes()[self.last_layer()].rows
    }

    fn validate(&self, params: &ModelParams, input: &[f64]) -> Result<()> {
        if self.num_layers == 0 || self.last_layer() >= params.num_layers() {
            return Err(Error::Shape(format!(
                "mlp spans layers {:?} but parameters hold {}",
                self.layers(),
                params.num_layers()
            )));
        }
        if input.len() != self.input_dim(params) {
            return Err(Error::Shape(format!(
                "mlp expects {} inputs, got {}",
                self.input_dim(params),
                input.len()
            )));
        }
        if let Some(i) = input.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("mlp input {i} is not finite")));
        }
        Ok(())
    }

    /// Record the network on `tape`, reading from node `x`. Returns the output node.
    pub fn record(&self, params: &ModelParams, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for l in self.layers() {
            h = tape.matvec(params, l, h)?;
            h = tape.add_bias(params, l, h)?;
            if l != self.last_layer() {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Forward pass; when `tape` is given the computation is appended to it.
    pub fn forward(
        &self,
        params: &ModelParams,
        input: &[f64],
        tape: Option<&mut Tape>,
    ) -> Result<Vec<f64>> {
        self.validate(params, input)?;
        match tape {
            Some(tape) => {
                let x = tape.input(input);
                let out = self.record(params, tape, x)?;
                Ok(tape.value(out).to_vec())
            }
            None => {
                let mut out = vec![0.0; self.output_dim(params)];
                self.eval_unchecked(params, input, &mut out);
                Ok(out)
            }
        }
    }

    /// Tape-free forward pass into `out`. Shapes are assumed valid.
    pub(crate) fn eval_unchecked(&self, params: &ModelParams, input: &[f64], out: &mut [f64]) {
        let mut cur: Vec<f64> = input.to_vec();
        let mut next = Vec::new();
        for l in self.layers() {
            let shape = params.shapes()[l];
            let w = params.weight(l);
            let b = params.bias(l);
            let last = l == self.last_layer();
            let dst: &mut Vec<f64> = &mut next;
            dst.clear();
            for (row, bias) in w.chunks_exact(shape.cols).zip(b) {
                let v = dot(row, &cur) + bias;
                dst.push(if last { v } else { v.tanh() });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        out.copy_from_slice(&cur);
    }
}

/// Evaluate `f_θ(z, t)`: time is appended to the state as a final input feature.
pub fn mlp_forward(
    params: &ModelParams,
    mlp: &Mlp,
    z: &[f64],
    t: f64,
    tape: Option<&mut Tape>,
) -> Result<Vec<f64>> {
    let mut input = Vec::with_capacity(z.len() + 1);
    input.extend_from_slice(z);
    input.push(t);
    mlp.forward(params, &input, tape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff::finite_difference_grad;
    use crate::nn::params::LayerShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_layer(seed: u64, d: usize, h: usize) -> (ModelParams, Mlp) {
        let shapes = [LayerShape::new(h, d + 1), LayerShape::new(d, h)];
        let p = ModelParams::init_uniform(&shapes, &mut ChaCha8Rng::seed_from_u64(seed));
        (p, Mlp::new(0, 2))
    }

    /// Straight-line reimplementation with explicit index loops.
    fn oracle(p: &ModelParams, z: &[f64], t: f64) -> Vec<f64> {
        let x: Vec<f64> = z.iter().copied().chain([t]).collect();
        let s0 = p.shapes()[0];
        let mut hidden = vec![0.0; s0.rows];
        for r in 0..s0.rows {
            let mut acc = p.bias(0)[r];
            for c in 0..s0.cols {
                acc += p.weight(0)[r * s0.cols + c] * x[c];
            }
            hidden[r] = acc.tanh();
        }
        let s1 = p.shapes()[1];
        let mut out = vec![0.0; s1.rows];
        for r in 0..s1.rows {
            let mut acc = p.bias(1)[r];
            for c in 0..s1.cols {
                acc += p.weight(1)[r * s1.cols + c] * hidden[c];
            }
            out[r] = acc;
        }
        out
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let shapes = [LayerShape::new(5, 4), LayerShape::new(3, 5)];
        let p = ModelParams::zeros(&shapes);
        let y = mlp_forward(&p, &Mlp::new(0, 2), &[0.3, -2.0, 9.0], 1.7, None).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn identity_linear_layer() {
        // weight = [1, 0] over (z, t), bias 0
        let p = ModelParams::from_flat(&[LayerShape::new(1, 2)], vec![1.0, 0.0, 0.0]).unwrap();
        let y = mlp_forward(&p, &Mlp::new(0, 1), &[0.5], 0.0, None).unwrap();
        assert_eq!(y, vec![0.5]);
    }

    #[test]
    fn matches_straight_line_oracle() {
        let (p, mlp) = two_layer(11, 3, 7);
        let z = [0.4, -1.2, 0.9];
        let expected = oracle(&p, &z, 0.35);
        let got = mlp_forward(&p, &mlp, &z, 0.35, None).unwrap();
        let mut tape = Tape::new();
        let taped = mlp_forward(&p, &mlp, &z, 0.35, Some(&mut tape)).unwrap();
        for i in 0..3 {
            assert!((got[i] - expected[i]).abs() < 1e-12);
            assert!((taped[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let (p, mlp) = two_layer(1, 2, 4);
        assert!(matches!(
            mlp_forward(&p, &mlp, &[1.0], 0.0, None),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            mlp_forward(&p, &mlp, &[1.0, f64::INFINITY], 0.0, None),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let (p, mlp) = two_layer(5, 4, 8);
        let z = [0.1, 0.2, -0.3, 0.4];
        let a = mlp_forward(&p, &mlp, &z, 0.5, None).unwrap();
        let b = mlp_forward(&p, &mlp, &z, 0.5, None).unwrap();
        assert_eq!(a, b);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        for (seed, depth, width) in [(0u64, 2usize, 16usize), (1, 3, 32), (2, 3, 8), (3, 1, 5)] {
            let d = 3;
            let mut shapes = vec![LayerShape::new(width, d + 1)];
            for _ in 1..depth.saturating_sub(1) {
                shapes.push(LayerShape::new(width, width));
            }
            if depth > 1 {
                shapes.push(LayerShape::new(d, width));
            } else {
                shapes[0] = LayerShape::new(d, d + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ModelParams::init_uniform(&shapes, &mut rng);
            let mlp = Mlp::new(0, shapes.len());
            let z = [0.3, -0.7, 1.1];
            let seed_vec = [0.5, -1.0, 2.0];

            let mut tape = Tape::new();
            mlp_forward(&p, &mlp, &z, 0.2, Some(&mut tape)).unwrap();
            let g = tape.backward(&p, &seed_vec).unwrap();

            let loss = |q: &ModelParams| -> f64 {
                let y = mlp_forward(q, &mlp, &z, 0.2, None).unwrap();
                y.iter().zip(&seed_vec).map(|(a, b)| a * b).sum()
            };
            let fd = finite_difference_grad(loss, &p, 1e-6).unwrap();
            let worst = g
                .params
                .iter()
                .zip(&fd)
                .filter(|(a, b)| a.abs().max(b.abs()) > 1e-7)
                .map(|(a, b)| rel_err(*a, *b))
                .fold(0.0, f64::max);
            assert!(worst < 1e-5, "depth {depth} width {width}: {worst}");

            // input gradient, z-part only
            for i in 0..d {
                let h = 1e-6;
                let mut zp = z;
                zp[i] += h;
                let mut zm = z;
                zm[i] -= h;
                let yp = mlp_forward(&p, &mlp, &zp, 0.2, None).unwrap();
                let ym = mlp_forward(&p, &mlp, &zm, 0.2, None).unwrap();
                let fd_i: f64 = yp
                    .iter()
                    .zip(&ym)
                    .zip(&seed_vec)
                    .map(|((a, b), s)| (a - b) / (2.0 * h) * s)
                    .sum();
                assert!(rel_err(g.inputs[0][i], fd_i) < 1e-5);
            }
        }
    }
}

//! Reverse-mode tape over coarse vector primitives.
//!
//! Nodes are dense vectors. Operations reference earlier nodes only, so the
//! recording order is a topological order and the backward sweep walks it in
//! reverse, visiting every node once.

use crate::error::{Error, Result};
use crate::nn::params::ModelParams;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    /// Leaf holding an input vector.
    Input,
    /// `W_layer · x`
    MatVec {
        layer: usize,
        x: NodeId,
    },
    /// `x + b_layer`
    AddBias {
        layer: usize,
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Sum of all entries, as a length-1 vector.
    Sum {
        x: NodeId,
    },
}

/// Recorded computation. Value buffers are pooled so a cleared tape can be
/// refilled without reallocating.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Vec<f64>>,
    len: usize,
    inputs: Vec<NodeId>,
}

/// Gradients produced by one backward sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TapeGradients {
    /// Same layout as [`ModelParams::flat_view`].
    pub params: Vec<f64>,
    /// One gradient per `Input` node, in recording order.
    pub inputs: Vec<Vec<f64>>,
}

/// Scratch adjoint buffers, reusable across backward sweeps.
#[derive(Clone, Debug, Default)]
pub struct BackwardScratch {
    adj: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.ops.clear();
        self.inputs.clear();
        self.len = 0;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id]
    }

    pub fn input_nodes(&self) -> &[NodeId] {
        &self.inputs
    }

    /// Id of the most recently recorded node.
    pub fn last(&self) -> Option<NodeId> {
        self.len.checked_sub(1)
    }

    fn push(&mut self, op: Op, width: usize) -> (NodeId, &mut Vec<f64>) {
        let id = self.len;
        if self.values.len() == id {
            self.values.push(Vec::with_capacity(width));
        }
        self.ops.push(op);
        self.len += 1;
        let buf = &mut self.values[id];
        buf.clear();
        (id, buf)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id >= self.len {
            return Err(Error::Shape(format!(
                "node {id} referenced before it was recorded"
            )));
        }
        Ok(())
    }

    pub fn input(&mut self, x: &[f64]) -> NodeId {
        let (id, buf) = self.push(Op::Input, x.len());
        buf.extend_from_slice(x);
        self.inputs.push(id);
        id
    }

    pub fn matvec(&mut self, params: &ModelParams, layer: usize, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let shape = params.shapes()[layer];
        if self.values[x].len() != shape.cols {
            return Err(Error::Shape(format!(
                "layer {layer} expects {} inputs, got {}",
                shape.cols,
                self.values[x].len()
            )));
        }
        let w = params.weight(layer);
        let xv = std::mem::take(&mut self.values[x]);
        let (id, buf) = self.push(Op::MatVec { layer, x }, shape.rows);
        buf.extend(w.chunks_exact(shape.cols).map(|row| dot(row, &xv)));
        self.values[x] = xv;
        Ok(id)
    }

    pub fn add_bias(&mut self, params: &ModelParams, layer: usize, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let b = params.bias(layer);
        if self.values[x].len() != b.len() {
            return Err(Error::Shape(format!(
                "bias of layer {layer} has {} entries, node has {}",
                b.len(),
                self.values[x].len()
            )));
        }
        let xv = std::mem::take(&mut self.values[x]);
        let (id, buf) = self.push(Op::AddBias { layer, x }, b.len());
        buf.extend(xv.iter().zip(b).map(|(a, b)| a + b));
        self.values[x] = xv;
        Ok(id)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh { x }, x, f64::tanh)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::Scale { x, c }, x, |v| c * v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.values[a].len() != self.values[b].len() {
            return Err(Error::Shape(format!(
                "add of nodes with {} and {} entries",
                self.values[a].len(),
                self.values[b].len()
            )));
        }
        let av = std::mem::take(&mut self.values[a]);
        let bv = if a == b {
            av.clone()
        } else {
            std::mem::take(&mut self.values[b])
        };
        let (id, buf) = self.push(Op::Add { a, b }, av.len());
        buf.extend(av.iter().zip(&bv).map(|(x, y)| x + y));
        self.values[a] = av;
        if a != b {
            self.values[b] = bv;
        }
        Ok(id)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s: f64 = self.values[x].iter().sum();
        let (id, buf) = self.push(Op::Sum { x }, 1);
        buf.push(s);
        Ok(id)
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        self.check(x)?;
        let xv = std::mem::take(&mut self.values[x]);
        let (id, buf) = self.push(op, xv.len());
        buf.extend(xv.iter().map(|&v| f(v)));
        self.values[x] = xv;
        Ok(id)
    }

    /// Vector-Jacobian product of the last recorded node with `seed`.
    pub fn backward(&self, params: &ModelParams, seed: &[f64]) -> Result<TapeGradients> {
        let mut grads = TapeGradients {
            params: vec![0.0; params.len()],
            inputs: self
                .inputs
                .iter()
                .map(|&i| vec![0.0; self.values[i].len()])
                .collect(),
        };
        let mut scratch = BackwardScratch::default();
        let mut input_grads = std::mem::take(&mut grads.inputs);
        {
            let mut views: Vec<&mut [f64]> =
                input_grads.iter_mut().map(|v| v.as_mut_slice()).collect();
            self.backward_accumulate(params, seed, &mut scratch, &mut grads.params, &mut views)?;
        }
        grads.inputs = input_grads;
        Ok(grads)
    }

    /// Accumulating form of [`Self::backward`]: parameter gradients are added
    /// into `grad_params`, input gradients into `grad_inputs` (one slice per
    /// `Input` node).
    pub fn backward_accumulate(
        &self,
        params: &ModelParams,
        seed: &[f64],
        scratch: &mut BackwardScratch,
        grad_params: &mut [f64],
        grad_inputs: &mut [&mut [f64]],
    ) -> Result<()> {
        let out = self
            .last()
            .ok_or_else(|| Error::State("backward on an empty tape".into()))?;
        if seed.len() != self.values[out].len() {
            return Err(Error::Shape(format!(
                "seed has {} entries, output node has {}",
                seed.len(),
                self.values[out].len()
            )));
        }
        if grad_params.len() != params.len() {
            return Err(Error::Shape("parameter gradient buffer length".into()));
        }
        if grad_inputs.len() != self.inputs.len() {
            return Err(Error::Shape(
                "one input gradient buffer per input node".into(),
            ));
        }

        let adj = &mut scratch.adj;
        if adj.len() < self.len {
            adj.resize_with(self.len, Vec::new);
        }
        for (i, a) in adj.iter_mut().take(self.len).enumerate() {
            a.clear();
            a.resize(self.values[i].len(), 0.0);
        }
        adj[out].copy_from_slice(seed);

        for id in (0..self.len).rev() {
            let ybar = std::mem::take(&mut adj[id]);
            match self.ops[id] {
                Op::Input => {}
                Op::MatVec { layer, x } => {
                    let shape = params.shapes()[layer];
                    let w = params.weight(layer);
                    let xv = &self.values[x];
                    let w_off = params.weight_offset(layer);
                    let xbar = &mut adj[x];
                    for (r, &yb) in ybar.iter().enumerate() {
                        if yb == 0.0 {
                            continue;
                        }
                        let row = &w[r * shape.cols..(r + 1) * shape.cols];
                        let grow =
                            &mut grad_params[w_off + r * shape.cols..w_off + (r + 1) * shape.cols];
                        for c in 0..shape.cols {
                            xbar[c] += row[c] * yb;
                            grow[c] += yb * xv[c];
                        }
                    }
                }
                Op::AddBias { layer, x } => {
                    let b_off = params.bias_offset(layer);
                    for (i, &yb) in ybar.iter().enumerate() {
                        adj[x][i] += yb;
                        grad_params[b_off + i] += yb;
                    }
                }
                Op::Tanh { x } => {
                    let y = &self.values[id];
                    for (i, &yb) in ybar.iter().enumerate() {
                        adj[x][i] += yb * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Scale { x, c } => {
                    for (i, &yb) in ybar.iter().enumerate() {
                        adj[x][i] += c * yb;
                    }
                }
                Op::Add { a, b } => {
                    for (i, &yb) in ybar.iter().enumerate() {
                        adj[a][i] += yb;
                        adj[b][i] += yb;
                    }
                }
                Op::Sum { x } => {
                    let yb = ybar[0];
                    for v in adj[x].iter_mut() {
                        *v += yb;
                    }
                }
            }
            adj[id] = ybar;
        }

        for (slot, &node) in grad_inputs.iter_mut().zip(&self.inputs) {
            for (g, a) in slot.iter_mut().zip(&adj[node]) {
                *g += a;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Tape::backward`].
pub fn tape_backward(tape: &Tape, params: &ModelParams, seed: &[f64]) -> Result<TapeGradients> {
    tape.backward(params, seed)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::LayerShape;

    fn linear(w: Vec<f64>, rows: usize, cols: usize) -> ModelParams {
        let mut flat = w;
        flat.extend(std::iter::repeat_n(0.0, rows));
        ModelParams::from_flat(&[LayerShape::new(rows, cols)], flat).unwrap()
    }

    #[test]
    fn linear_map_input_gradient_is_row() {
        let p = linear(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        let mut tape = Tape::new();
        let x = tape.input(&[0.3, -0.1, 0.7]);
        tape.matvec(&p, 0, x).unwrap();
        for i in 0..2 {
            let mut seed = vec![0.0; 2];
            seed[i] = 1.0;
            let g = tape.backward(&p, &seed).unwrap();
            assert_eq!(g.inputs[0], p.weight(0)[i * 3..(i + 1) * 3].to_vec());
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let p = linear(vec![1.0, -2.0, 0.5, 4.0], 2, 2);
        let mut tape = Tape::new();
        let x = tape.input(&[1.0, 2.0]);
        let h = tape.matvec(&p, 0, x).unwrap();
        let h = tape.add_bias(&p, 0, h).unwrap();
        tape.tanh(h).unwrap();
        let g = tape.backward(&p, &[0.0, 0.0]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.inputs[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_add_sum_rules() {
        let p = ModelParams::zeros(&[]);
        let mut tape = Tape::new();
        let x = tape.input(&[1.0, 2.0, 3.0]);
        let y = tape.scale(x, 3.0).unwrap();
        let z = tape.add(x, y).unwrap();
        let s = tape.sum(z).unwrap();
        assert_eq!(tape.value(s), &[24.0]);
        let g = tape.backward(&p, &[2.0]).unwrap();
        assert_eq!(g.inputs[0], vec![8.0, 8.0, 8.0]);
    }

    #[test]
    fn backward_leaves_tape_reusable() {
        let p = linear(vec![0.5, -1.5], 1, 2);
        let mut tape = Tape::new();
        let x = tape.input(&[2.0, 1.0]);
        tape.matvec(&p, 0, x).unwrap();
        let a = tape.backward(&p, &[1.0]).unwrap();
        let b = tape.backward(&p, &[1.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params[..2], [2.0, 1.0]);
    }

    #[test]
    fn seed_dimension_mismatch_is_shape_error() {
        let p = linear(vec![1.0, 1.0], 1, 2);
        let mut tape = Tape::new();
        let x = tape.input(&[1.0, 1.0]);
        tape.matvec(&p, 0, x).unwrap();
        assert!(matches!(
            tape.backward(&p, &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn recording_order_is_topological() {
        let p = linear(vec![1.0; 4], 2, 2);
        let mut tape = Tape::new();
        let x = tape.input(&[1.0, 1.0]);
        let h = tape.matvec(&p, 0, x).unwrap();
        let h = tape.add_bias(&p, 0, h).unwrap();
        let h = tape.tanh(h).unwrap();
        tape.add(h, x).unwrap();
        for (id, op) in tape.ops().iter().enumerate() {
            let deps: Vec<NodeId> = match *op {
                Op::Input => vec![],
                Op::MatVec { x, .. }
                | Op::AddBias { x, .. }
                | Op::Tanh { x }
                | Op::Scale { x, .. }
                | Op::Sum { x } => vec![x],
                Op::Add { a, b } => vec![a, b],
            };
            assert!(deps.iter().all(|&d| d < id));
        }
    }

    #[test]
    fn referencing_unrecorded_node_fails() {
        let p = linear(vec![1.0], 1, 1);
        let mut tape = Tape::new();
        assert!(tape.matvec(&p, 0, 3).is_err());
    }
}

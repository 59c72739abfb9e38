use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one dense layer: `rows` outputs, `cols` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    /// Weight entries plus bias entries.
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense-layer parameters stored in one contiguous buffer.
///
/// Each layer occupies `rows * cols` row-major weight entries followed by
/// `rows` bias entries, layers in declaration order. The buffer is the flat
/// view used by the optimizer and by every gradient routine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

fn offsets_of(shapes: &[LayerShape]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut acc = 0;
    for s in shapes {
        offsets.push(acc);
        acc += s.len();
    }
    (offsets, acc)
}

impl ModelParams {
    pub fn zeros(shapes: &[LayerShape]) -> Self {
        let (offsets, total) = offsets_of(shapes);
        Self {
            shapes: shapes.to_vec(),
            offsets,
            data: vec![0.0; total],
        }
    }

    /// Uniform initialization on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for
    /// weights and biases alike.
    pub fn init_uniform<R: Rng + ?Sized>(shapes: &[LayerShape], rng: &mut R) -> Self {
        let mut params = Self::zeros(shapes);
        for l in 0..shapes.len() {
            let bound = 1.0 / (shapes[l].cols.max(1) as f64).sqrt();
            let (off, len) = (params.offsets[l], shapes[l].len());
            for w in &mut params.data[off..off + len] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        params
    }

    /// Rebuild parameters from a flat vector laid out as [`Self::flat_view`].
    pub fn from_flat(shapes: &[LayerShape], flat: Vec<f64>) -> Result<Self> {
        let (offsets, total) = offsets_of(shapes);
        if flat.len() != total {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, layers need {}",
                flat.len(),
                total
            )));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self {
            shapes: shapes.to_vec(),
            offsets,
            data: flat,
        })
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat_view(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Offset of layer `l`'s weight block in the flat view.
    pub fn weight_offset(&self, l: usize) -> usize {
        self.offsets[l]
    }

    /// Offset of layer `l`'s bias block in the flat view.
    pub fn bias_offset(&self, l: usize) -> usize {
        self.offsets[l] + self.shapes[l].rows * self.shapes[l].cols
    }

    pub fn weight(&self, l: usize) -> &[f64] {
        let off = self.weight_offset(l);
        &self.data[off..off + self.shapes[l].rows * self.shapes[l].cols]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let off = self.weight_offset(l);
        let n = self.shapes[l].rows * self.shapes[l].cols;
        &mut self.data[off..off + n]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let off = self.bias_offset(l);
        &self.data[off..off + self.shapes[l].rows]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let off = self.bias_offset(l);
        let n = self.shapes[l].rows;
        &mut self.data[off..off + n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_is_weight_then_bias() {
        let shapes = [LayerShape::new(2, 3), LayerShape::new(1, 2)];
        let p = ModelParams::from_flat(&shapes, (0..11).map(f64::from).collect()).unwrap();
        assert_eq!(p.weight(0), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(p.bias(0), &[6.0, 7.0]);
        assert_eq!(p.weight(1), &[8.0, 9.0]);
        assert_eq!(p.bias(1), &[10.0]);
    }

    #[test]
    fn from_flat_rejects_bad_input() {
        let shapes = [LayerShape::new(1, 1)];
        assert!(matches!(
            ModelParams::from_flat(&shapes, vec![1.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            ModelParams::from_flat(&shapes, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn init_is_bounded_by_fan_in() {
        let shapes = [LayerShape::new(8, 16)];
        let p = ModelParams::init_uniform(&shapes, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(p.flat_view().iter().all(|w| w.abs() <= 0.25));
        assert!(p.all_finite());
    }

    proptest! {
        #[test]
        fn flatten_round_trip(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..6) {
            let shapes = [LayerShape::new(rows, cols), LayerShape::new(cols, rows)];
            let p = ModelParams::init_uniform(&shapes, &mut ChaCha8Rng::seed_from_u64(seed));
            let q = ModelParams::from_flat(&shapes, p.flat_view().to_vec()).unwrap();
            prop_assert_eq!(p.flat_view().len(), shapes.iter().map(|s| s.len()).sum::<usize>());
            prop_assert_eq!(p, q);
        }
    }
}

use crate::error::{Error, Result};
use crate::nn::params::ModelParams;

/// Central-difference gradient of `loss` with respect to every parameter.
pub fn finite_difference_grad<F>(loss: F, params: &ModelParams, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&ModelParams) -> f64,
{
    let mut probe = params.clone();
    finite_difference_grad_flat(
        |x| {
            probe.flat_mut().copy_from_slice(x);
            loss(&probe)
        },
        params.flat_view(),
        eps,
    )
}

/// Same as [`finite_difference_grad`] over a plain vector.
pub fn finite_difference_grad_flat<F>(mut loss: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut work = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        work[i] = x[i] + eps;
        let up = loss(&work);
        work[i] = x[i] - eps;
        let down = loss(&work);
        work[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::LayerShape;

    fn params(values: &[f64]) -> ModelParams {
        // One 1×(n-1) layer: n-1 weights and a single bias.
        let shapes = [LayerShape::new(1, values.len() - 1)];
        ModelParams::from_flat(&shapes, values.to_vec()).unwrap()
    }

    #[test]
    fn quadratic() {
        let g = finite_difference_grad(
            |p| p.flat_view().iter().map(|v| v * v).sum(),
            &params(&[1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_loss() {
        let g = finite_difference_grad(|_| 3.5, &params(&[0.1, -0.4, 7.0]), 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine() {
        let g =
            finite_difference_grad(|p| p.flat_view()[0].sin(), &params(&[0.3, 0.0]), 1e-5).unwrap();
        assert!((g[0] - 0.3f64.cos()).abs() < 1e-8);
        assert!((g[0] - 0.955336489125606).abs() < 1e-8);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            finite_difference_grad(|_| 0.0, &params(&[1.0, 1.0]), 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            finite_difference_grad(
                |p| if p.flat_view()[0] > 1.0 {
                    f64::NAN
                } else {
                    0.0
                },
                &params(&[1.0, 0.0]),
                1e-6
            ),
            Err(Error::Numeric(_))
        ));
    }
}

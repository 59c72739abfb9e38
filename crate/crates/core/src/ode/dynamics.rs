/// Right-hand side `dz/dt = f(t, z)`.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;

    /// Write `f(t, z)` into `out`.
    fn eval(&self, t: f64, z: &[f64], out: &mut [f64]);
}

/// Dynamics with parameters that admit vector-Jacobian products.
pub trait Differentiable: Dynamics {
    fn num_params(&self) -> usize;

    /// For cotangent `w`, overwrite `grad_z` with `wᵀ ∂f/∂z` and add
    /// `wᵀ ∂f/∂θ` into `grad_params`.
    fn vjp(&self, t: f64, z: &[f64], w: &[f64], grad_z: &mut [f64], grad_params: &mut [f64]);
}

/// Adapter turning a closure into [`Dynamics`].
pub struct FnDynamics<F> {
    dim: usize,
    f: F,
}

impl<F> FnDynamics<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Dynamics for FnDynamics<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, z: &[f64], out: &mut [f64]) {
        (self.f)(t, z, out)
    }
}

/// `f_θ(z) = θ·z` with a single scalar parameter; its sensitivities are
/// available in closed form.
#[derive(Clone, Copy, Debug)]
pub struct ScalarLinear {
    pub theta: f64,
    pub dim: usize,
}

impl Dynamics for ScalarLinear {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _t: f64, z: &[f64], out: &mut [f64]) {
        for (o, zi) in out.iter_mut().zip(z) {
            *o = self.theta * zi;
        }
    }
}

impl Differentiable for ScalarLinear {
    fn num_params(&self) -> usize {
        1
    }

    fn vjp(&self, _t: f64, z: &[f64], w: &[f64], grad_z: &mut [f64], grad_params: &mut [f64]) {
        let mut g = 0.0;
        for i in 0..z.len() {
            grad_z[i] = self.theta * w[i];
            g += w[i] * z[i];
        }
        grad_params[0] += g;
    }
}

/// Parameter-free dynamics `f ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct Zero {
    pub dim: usize,
}

impl Dynamics for Zero {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _t: f64, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

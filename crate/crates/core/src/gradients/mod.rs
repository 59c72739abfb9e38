//! Sensitivities of the task loss and regularizers.

pub mod backsolve;
pub mod discrete;
pub mod total;

pub use backsolve::{backsolve_adjoint, AdjointOutcome};
pub use discrete::{discrete_backprop, discrete_backprop_seeded, step_backward, TrajectorySeeds};
pub use total::{
    check_combination, grad_total_loss, item_gradient, BatchGradient, GradientRequest,
    ItemGradient, RetentionMeter, Sensitivity,
};

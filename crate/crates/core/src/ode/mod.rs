//! Explicit embedded Runge-Kutta integration with PI step control.

pub mod controller;
pub mod dense;
pub mod dynamics;
pub mod options;
pub mod solve;
pub mod step;
pub mod tableau;

pub use controller::{initial_dt, pi_new_dt, InitialStep, INITIAL_DT_FALLBACK};
pub use dense::{bracket, hermite_segment, hermite_weights, interpolate};
pub use dynamics::{Differentiable, Dynamics, FnDynamics, ScalarLinear, Zero};
pub use options::SolverOptions;
pub use solve::{
    solve_adaptive, solve_endpoint, solve_endpoint_observed, solve_fixed, solve_fixed_uniform,
    Endpoint, SolutionTrajectory,
};
pub use step::{error_norm, rk_step, StepOutcome};
pub use tableau::{check_order_conditions, OrderConditionReport, Tableau};

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod datasets;
pub mod error;
pub mod gradients;
pub mod model;
pub mod nn;
pub mod ode;
pub mod regularization;
pub mod training;

pub use error::{Error, Result, SolverError};

//! Learning substrate: dense parameters, a reverse-mode tape, MLPs and Adam.

pub mod adam;
pub mod finite_diff;
pub mod mlp;
pub mod params;
pub mod tape;

pub use adam::{adam_update, AdamState};
pub use finite_diff::{finite_difference_grad, finite_difference_grad_flat};
pub use mlp::{mlp_forward, Mlp};
pub use params::{LayerShape, ModelParams};
pub use tape::{tape_backward, BackwardScratch, NodeId, Op, Tape, TapeGradients};

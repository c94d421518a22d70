//! Dense tensors with a reverse-mode gradient tape and Adam.

mod dense;
mod float;
pub mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod params;
mod segments;
mod tape;

pub use dense::Tensor;
pub use float::Float;
pub use gradcheck::{finite_difference_check, param_gradient_check, GradCheckReport};
pub use optim::{clip_grad_norm, warmup_lr, AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamStore};
pub use segments::Segments;
pub use tape::{Tape, Var, DEGENERATE_NORM};

#[cfg(test)]
mod tape_tests;

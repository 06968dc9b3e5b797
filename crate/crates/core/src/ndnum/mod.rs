//! Dense n-dimensional `f64` arrays, reverse-mode autodiff and the optimiser.

mod kernels;
mod optim;
mod tape;
mod tensor;

pub use kernels::{gemm, Trans};
pub use optim::{adam_step, lr_schedule, AdamState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

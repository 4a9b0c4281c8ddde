//! Dense tensors with reverse-mode differentiation and an Adam optimizer.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_exec, grad_check_staged, grad_check_with, relative_error, Coverage,
    EntryCheck, GradCheckReport,
};
pub use optim::{optimizer_step, AdamConfig, OptimState};
pub use tape::{Binary, Reduce, Tape, Unary, Var};
pub use tensor::{Tensor, TensorError};

#[cfg(test)]
mod tests;

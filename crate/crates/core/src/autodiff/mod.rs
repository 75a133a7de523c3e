//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_diff_check, relative_error, GradCheckConfig, GradCheckEntry, GradCheckReport,
};
pub use tape::{set_corrupt_tanh_backward, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::sigmoid;

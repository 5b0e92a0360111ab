//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use tape::{gelu, Activation, Tape, Var};
pub use tensor::{Init, Tensor};

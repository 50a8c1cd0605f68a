//! Reverse-mode differentiable array math.
//!
//! [`Tensor`] is a plain value. Computation happens on [`Var`] handles
//! recorded on a [`Tape`]; calling [`Tape::backward`] on a scalar fills
//! gradients for every leaf that requires one. Trainable state lives in
//! [`Parameter`]s owned by networks implementing [`Module`].

pub mod gradcheck;
pub mod kernels;
mod ops;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_module, numeric_gradient, relative_error};
pub use ops::{log_sum_exp, sigmoid};
pub use param::{Module, ParamId, Parameter};
pub use tape::{BackwardFn, Tape, Var};
pub use tensor::Tensor;

//! Differentiable dense-tensor computation: the primitive ops the agents are
//! built from, reverse-mode gradient propagation, and a finite-difference
//! gradient checker.

pub mod grad_check;
pub mod kernels;
pub mod scalar;
pub mod tensor;

pub use grad_check::{grad_check, GradCheckReport};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

//! Multi-agent reinforcement learning for multi-label image classification.
//!
//! Two prior-knowledge agents (a multi-scale semantic classifier and a
//! foreground-attention visual agent) condition a transformer-decoder
//! diagnostic agent trained as a DQN with experience replay and ε-greedy
//! exploration. The crate also ships the synthetic-benchmark generator,
//! ROC/AUC evaluation with bootstrap intervals, and the training
//! orchestration needed to reproduce the framework's ablation and
//! exploration behaviors on a desk-scale CPU budget.
//!
//! Core math is generic over the scalar type: `f32` for training runs,
//! `f64` for gradient-check suites (see [`Tensor32`] / [`Tensor64`]).

pub mod autodiff;
pub mod agents;
pub mod config;
pub mod data;
pub mod diagnostic;
pub mod rl;
pub mod train;
pub mod error;
pub mod eval;
pub mod model;
pub mod util;

pub use autodiff::{grad_check, Dtype, GradCheckReport, Scalar, Tensor};
pub use error::{Error, Result};

/// Training-width tensor.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check-width tensor.
pub type Tensor64 = Tensor<f64>;

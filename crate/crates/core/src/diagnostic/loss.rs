//! Asymmetric focal loss: separate focusing exponents for positive and
//! negative classes, reducing to binary cross-entropy at γ+ = γ− = 0.

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean over the batch of `(1/C) Σ_c` focal terms, with label convention
/// `y_c = 1` ⇔ class present:
///
/// - present: `(1 - p_c)^γ+ · (-log p_c)`
/// - absent:  `p_c^γ− · (-log(1 - p_c))`
///
/// Nonnegative by construction (the log-likelihood is negated).
pub fn asl_loss<S: Scalar>(
    probs: &Tensor<S>,
    labels: &[u8],
    gamma_pos: f64,
    gamma_neg: f64,
) -> Result<Tensor<S>> {
    if gamma_pos < 0.0 || gamma_neg < 0.0 {
        return Err(Error::Config(format!(
            "asl_loss: negative focusing exponents ({gamma_pos}, {gamma_neg})"
        )));
    }
    if probs.numel() != labels.len() {
        return Err(Error::Contract(format!(
            "asl_loss: {} probabilities vs {} labels",
            probs.numel(),
            labels.len()
        )));
    }
    let eps = S::from_f64(1e-7);
    let p = probs.clamp(eps, S::one() - eps);
    let one_minus_p = p.mul_scalar(-S::one()).add_scalar(S::one());

    let y: Vec<S> = labels
        .iter()
        .map(|&l| if l == 1 { S::one() } else { S::zero() })
        .collect();
    let y = Tensor::leaf(y, probs.shape(), false)?;
    let one_minus_y = y.mul_scalar(-S::one()).add_scalar(S::one());

    let pos = one_minus_p
        .pow_scalar(S::from_f64(gamma_pos))
        .mul(&p.log().mul_scalar(-S::one()))?;
    let neg = p
        .pow_scalar(S::from_f64(gamma_neg))
        .mul(&one_minus_p.log().mul_scalar(-S::one()))?;

    Ok(y.mul(&pos)?.add(&one_minus_y.mul(&neg)?)?.mean())
}

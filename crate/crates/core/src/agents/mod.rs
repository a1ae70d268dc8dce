//! The two prior-knowledge agents and their shared supervision loss.

pub mod backbone;
pub mod layers;
pub mod semantic;
pub mod visual;

pub use backbone::{Backbone, BackboneConfig};
pub use semantic::{SemanticAgent, SemanticOutput};
pub use visual::{VisualAgent, VisualOutput};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Multi-label binary cross-entropy over sigmoid probabilities: the prior
/// agents' supervision loss. Probabilities are clamped to
/// `[1e-7, 1 - 1e-7]` before the logs.
pub fn prior_loss<S: Scalar>(probs: &Tensor<S>, labels: &[u8]) -> Result<Tensor<S>> {
    if probs.numel() != labels.len() {
        return Err(Error::Contract(format!(
            "prior_loss: {} probabilities vs {} labels",
            probs.numel(),
            labels.len()
        )));
    }
    let eps = S::from_f64(1e-7);
    let p = probs.clamp(eps, S::one() - eps);
    let y: Vec<S> = labels
        .iter()
        .map(|&l| if l == 1 { S::one() } else { S::zero() })
        .collect();
    let y = Tensor::leaf(y, probs.shape(), false)?;
    let one_minus_y = y.mul_scalar(-S::one()).add_scalar(S::one());
    let one_minus_p = p.mul_scalar(-S::one()).add_scalar(S::one());
    let ll = y
        .mul(&p.log())?
        .add(&one_minus_y.mul(&one_minus_p.log())?)?;
    Ok(ll.mean().mul_scalar(-S::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor64;

    #[test]
    fn perfect_prediction_is_almost_free() {
        let p = Tensor64::leaf(vec![1.0, 0.0, 1.0], &[1, 3], false).unwrap();
        let loss = prior_loss(&p, &[1, 0, 1]).unwrap().item();
        assert!(loss <= 1.7e-7, "loss {loss}");
    }

    #[test]
    fn coin_flip_is_ln2() {
        let p = Tensor64::leaf(vec![0.5; 6], &[2, 3], false).unwrap();
        let loss = prior_loss(&p, &[1, 0, 1, 0, 1, 0]).unwrap().item();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_class_analytic_value() {
        let p = Tensor64::leaf(vec![0.25], &[1, 1], false).unwrap();
        let loss = prior_loss(&p, &[1]).unwrap().item();
        assert!((loss - 0.25f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn class_permutation_invariance() {
        let p = Tensor64::leaf(vec![0.9, 0.2, 0.7, 0.1, 0.5, 0.6], &[2, 3], false).unwrap();
        let labels = [1u8, 0, 1, 0, 0, 1];
        let base = prior_loss(&p, &labels).unwrap().item();
        // permute class columns (0,1,2) -> (2,0,1) simultaneously
        let perm = [2usize, 0, 1];
        let mut pp = vec![0.0; 6];
        let mut pl = [0u8; 6];
        for b in 0..2 {
            for c in 0..3 {
                pp[b * 3 + c] = p.to_vec()[b * 3 + perm[c]];
                pl[b * 3 + c] = labels[b * 3 + perm[c]];
            }
        }
        let p2 = Tensor64::leaf(pp, &[2, 3], false).unwrap();
        let permuted = prior_loss(&p2, &pl).unwrap().item();
        // summation order differs, so allow the last few ulps
        assert!((base - permuted).abs() < 1e-14);
    }
}

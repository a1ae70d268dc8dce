//! Label embeddings and their warm-start initialization from the semantic
//! agent's class heads.

use crate::autodiff::{Scalar, Tensor};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::util::{normal_vec, rng_for};

pub struct LabelEmbeddings<S: Scalar> {
    /// Decoder query set, one learnable `d`-vector per class.
    pub q0: Tensor<S>,
    /// Learnable positional term added to label queries.
    pub pos_label: Tensor<S>,
    /// Learnable positional term added to feature keys.
    pub pos_feat: Tensor<S>,
}

impl<S: Scalar> LabelEmbeddings<S> {
    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        out.push(("diag.embed.q0".to_string(), self.q0.clone()));
        out.push(("diag.embed.pos_label".to_string(), self.pos_label.clone()));
        out.push(("diag.embed.pos_feat".to_string(), self.pos_feat.clone()));
    }
}

/// Build the embeddings. With `semantic_head` present, `Q0` rows are the
/// semantic agent's per-class head weight vectors (projected through a fixed
/// seeded orthonormal map when widths differ); otherwise cold-start rows are
/// drawn from N(0, 0.02). Positional terms always start at N(0, 0.02).
pub fn init_label_embeddings<S: Scalar>(
    semantic_head: Option<&Tensor<S>>,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<LabelEmbeddings<S>> {
    let (c, d, hw) = (cfg.classes, cfg.d, cfg.hw());
    let mut rng = rng_for(seed, "label-embeddings");

    let q0_values: Vec<S> = match semantic_head {
        Some(head) => {
            let src_d = head.shape()[1];
            if src_d == d {
                head.to_vec()
            } else {
                let proj = orthonormal_projection::<S>(src_d, d, seed);
                let h = head.data();
                let mut out = vec![S::zero(); c * d];
                crate::autodiff::kernels::matmul_acc(&h, &proj, c, src_d, d, &mut out);
                out
            }
        }
        None => normal_vec(&mut rng, c * d, 0.02),
    };

    Ok(LabelEmbeddings {
        q0: Tensor::leaf(q0_values, &[c, d], true)?,
        pos_label: Tensor::leaf(normal_vec(&mut rng, c * d, 0.02), &[c, d], true)?,
        pos_feat: Tensor::leaf(normal_vec(&mut rng, hw * d, 0.02), &[hw, d], true)?,
    })
}

/// Fixed seeded random projection `[src, dst]` with orthonormal columns
/// (or rows when `dst > src`), via modified Gram-Schmidt.
fn orthonormal_projection<S: Scalar>(src: usize, dst: usize, seed: u64) -> Vec<S> {
    let mut rng = rng_for(seed, "q0-projection");
    let g: Vec<f64> = (0..src * dst)
        .map(|_| crate::util::normal_f64(&mut rng))
        .collect();
    // Work on the side with the fewer vectors so orthonormalization is exact.
    let (rows, cols, transpose) = if dst <= src {
        (src, dst, false)
    } else {
        (dst, src, true)
    };
    // columns of an rows x cols matrix
    let mut m = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            m[r * cols + c] = if transpose { g[c * dst + r] } else { g[r * dst + c] };
        }
    }
    for c in 0..cols {
        for prev in 0..c {
            let mut dot = 0.0;
            for r in 0..rows {
                dot += m[r * cols + c] * m[r * cols + prev];
            }
            for r in 0..rows {
                m[r * cols + c] -= dot * m[r * cols + prev];
            }
        }
        let norm: f64 = (0..rows).map(|r| m[r * cols + c] * m[r * cols + c]).sum::<f64>().sqrt();
        for r in 0..rows {
            m[r * cols + c] /= norm.max(1e-12);
        }
    }
    let mut out = vec![S::zero(); src * dst];
    for r in 0..src {
        for c in 0..dst {
            let v = if transpose { m[c * cols + r] } else { m[r * cols + c] };
            out[r * dst + c] = S::from_f64(v);
        }
    }
    out
}

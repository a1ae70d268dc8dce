//! The diagnostic agent: a transformer-decoder stack without self-attention
//! that fuses prior-agent features under learnable label embeddings and
//! emits per-class scores, trained with an asymmetric focal loss and a TD
//! loss.

pub mod embeddings;
pub mod fusion;
pub mod loss;

pub use embeddings::{init_label_embeddings, LabelEmbeddings};
pub use fusion::FeatureFusion;
pub use loss::asl_loss;

use rand_chacha::ChaCha8Rng;

use crate::agents::layers::LinearLayer;
use crate::autodiff::{Scalar, Tensor};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::util::normal_vec;

/// One decoder layer: multi-head cross-attention from label queries to
/// spatial features (no self-attention among queries), residual, then a
/// feed-forward block over the layer-normed result with a second residual.
pub struct DecoderLayer<S: Scalar> {
    wq: Vec<Tensor<S>>,
    wk: Vec<Tensor<S>>,
    wv: Vec<Tensor<S>>,
    wo: Tensor<S>,
    ln_gain: Tensor<S>,
    ln_bias: Tensor<S>,
    ffn1: LinearLayer<S>,
    ffn2: LinearLayer<S>,
    heads: usize,
    d: usize,
}

impl<S: Scalar> DecoderLayer<S> {
    fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize, ffn_width: usize) -> DecoderLayer<S> {
        let dh = d / heads;
        let std = (1.0 / d as f64).sqrt();
        let mut proj = |rows: usize, cols: usize| {
            Tensor::leaf(normal_vec(rng, rows * cols, std), &[rows, cols], true).unwrap()
        };
        let wq = (0..heads).map(|_| proj(d, dh)).collect();
        let wk = (0..heads).map(|_| proj(d, dh)).collect();
        let wv = (0..heads).map(|_| proj(d, dh)).collect();
        let wo = proj(d, d);
        DecoderLayer {
            wq,
            wk,
            wv,
            wo,
            ln_gain: Tensor::leaf(vec![S::one(); d], &[d], true).unwrap(),
            ln_bias: Tensor::leaf(vec![S::zero(); d], &[d], true).unwrap(),
            ffn1: LinearLayer::new(rng, d, ffn_width),
            ffn2: LinearLayer::new(rng, ffn_width, d),
            heads,
            d,
        }
    }

    /// Returns the updated label embedding `[B,C,d]` and the per-head
    /// attention rows `[B,heads,C,HW]` (detached copy).
    pub fn forward(
        &self,
        l_prev: &Tensor<S>,
        feat: &Tensor<S>,
        embeds: &LabelEmbeddings<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let (b, c, d) = (l_prev.shape()[0], l_prev.shape()[1], self.d);
        let hw = feat.shape()[1];
        if feat.shape() != [b, hw, d] {
            return Err(Error::Shape {
                op: "decoder_layer",
                lhs: l_prev.shape().to_vec(),
                rhs: feat.shape().to_vec(),
            });
        }
        let dh = d / self.heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());

        // q, k carry learnable positional terms; values do not.
        let q_in = l_prev.add_broadcast(&embeds.pos_label)?.reshape(&[b * c, d])?;
        let k_in = feat.add_broadcast(&embeds.pos_feat)?.reshape(&[b * hw, d])?;
        let v_in = feat.reshape(&[b * hw, d])?;

        let mut contexts = Vec::with_capacity(self.heads);
        let mut attn_maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = q_in.matmul(&self.wq[h])?.reshape(&[b, c, dh])?;
            let k = k_in.matmul(&self.wk[h])?.reshape(&[b, hw, dh])?;
            let v = v_in.matmul(&self.wv[h])?.reshape(&[b, hw, dh])?;
            let scores = q.matmul_batch_t(&k)?.mul_scalar(scale);
            let attn = scores.softmax(2)?;
            attn_maps.push(attn.detach().reshape(&[b, 1, c, hw])?);
            contexts.push(attn.matmul_batch(&v)?);
        }
        let ctx = Tensor::concat(&contexts, 2)?;
        let mh = ctx.reshape(&[b * c, d])?.matmul(&self.wo)?.reshape(&[b, c, d])?;
        let f_dot = mh.add(l_prev)?;

        let normed = f_dot.layer_norm(&self.ln_gain, &self.ln_bias, S::from_f64(1e-5))?;
        let ffn = self
            .ffn2
            .forward(&self.ffn1.forward(&normed.reshape(&[b * c, d])?)?.relu())?
            .reshape(&[b, c, d])?;
        let l_next = ffn.add(&f_dot)?;

        let attention = Tensor::concat(&attn_maps, 1)?;
        Ok((l_next, attention))
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for h in 0..self.heads {
            out.push((format!("{prefix}.h{h}.wq"), self.wq[h].clone()));
            out.push((format!("{prefix}.h{h}.wk"), self.wk[h].clone()));
            out.push((format!("{prefix}.h{h}.wv"), self.wv[h].clone()));
        }
        out.push((format!("{prefix}.wo"), self.wo.clone()));
        out.push((format!("{prefix}.ln_gain"), self.ln_gain.clone()));
        out.push((format!("{prefix}.ln_bias"), self.ln_bias.clone()));
        self.ffn1.params(&format!("{prefix}.ffn1"), out);
        self.ffn2.params(&format!("{prefix}.ffn2"), out);
    }
}

pub struct DiagnosticOutput<S: Scalar> {
    /// Final fused per-class features `[B,C,d]`.
    pub fused: Tensor<S>,
    pub logits: Tensor<S>,
    pub probs: Tensor<S>,
    /// Per-layer attention rows `[B,heads,C,HW]`, detached.
    pub attention: Vec<Tensor<S>>,
}

pub struct DiagnosticAgent<S: Scalar> {
    pub embeddings: LabelEmbeddings<S>,
    layers: Vec<DecoderLayer<S>>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
    classes: usize,
    d: usize,
}

impl<S: Scalar> DiagnosticAgent<S> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        embeddings: LabelEmbeddings<S>,
    ) -> Result<DiagnosticAgent<S>> {
        cfg.validate()?;
        let layers = (0..cfg.decoder.layers)
            .map(|_| DecoderLayer::new(rng, cfg.d, cfg.decoder.heads, cfg.ffn_width()))
            .collect();
        let std = (1.0 / cfg.d as f64).sqrt();
        let head_w = Tensor::leaf(
            normal_vec(rng, cfg.classes * cfg.d, std),
            &[cfg.classes, cfg.d],
            true,
        )?;
        let head_b = Tensor::leaf(vec![S::zero(); cfg.classes], &[cfg.classes], true)?;
        Ok(DiagnosticAgent {
            embeddings,
            layers,
            head_w,
            head_b,
            classes: cfg.classes,
            d: cfg.d,
        })
    }

    /// Run the decoder stack from `Q0` over fused prior features `[B,HW,d]`.
    pub fn forward(&self, feat: &Tensor<S>) -> Result<DiagnosticOutput<S>> {
        let b = feat.shape()[0];
        let mut l = self.embeddings.q0.broadcast_batch(b)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, attn) = layer.forward(&l, feat, &self.embeddings)?;
            attention.push(attn);
            l = next;
        }
        let logits = l.per_class_linear(&self.head_w, &self.head_b)?;
        let probs = logits.sigmoid();
        Ok(DiagnosticOutput {
            fused: l,
            logits,
            probs,
            attention,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.embeddings.params(out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("diag.layer{i}"), out);
        }
        out.push(("diag.head.w".to_string(), self.head_w.clone()));
        out.push(("diag.head.b".to_string(), self.head_b.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn tiny() -> (ModelConfig, DiagnosticAgent<f64>) {
        let cfg = ModelConfig::tiny_for_checks(3);
        let mut rng = rng_for(21, "diag");
        let embeds = init_label_embeddings::<f64>(None, &cfg, 21).unwrap();
        let agent = DiagnosticAgent::new(&mut rng, &cfg, embeds).unwrap();
        (cfg, agent)
    }

    fn rand_feat(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f64> {
        let hw = cfg.hw();
        Tensor::leaf(
            crate::util::normal_vec(&mut rng_for(seed, "feat"), b * hw * cfg.d, 1.0),
            &[b, hw, cfg.d],
            false,
        )
        .unwrap()
    }

    #[test]
    fn output_shapes_match_contract() {
        let (cfg, agent) = tiny();
        let feat = rand_feat(&cfg, 2, 1);
        let out = agent.forward(&feat).unwrap();
        assert_eq!(out.fused.shape(), &[2, 3, cfg.d]);
        assert_eq!(out.logits.shape(), &[2, 3]);
        assert_eq!(out.attention.len(), cfg.decoder.layers);
        assert_eq!(out.attention[0].shape(), &[2, cfg.decoder.heads, 3, cfg.hw()]);
    }

    #[test]
    fn identical_keys_make_attention_uniform() {
        let (cfg, agent) = tiny();
        let hw = cfg.hw();
        // keys are feat + pos_feat, so zero the positional term and repeat
        // one feature row to make every key identical
        agent
            .embeddings
            .pos_feat
            .set_data(&vec![0.0; agent.embeddings.pos_feat.numel()]);
        let row: Vec<f64> = crate::util::normal_vec(&mut rng_for(2, "row"), cfg.d, 1.0);
        let mut vals = Vec::new();
        for _ in 0..hw {
            vals.extend_from_slice(&row);
        }
        let feat = Tensor::leaf(vals, &[1, hw, cfg.d], false).unwrap();
        let out = agent.forward(&feat).unwrap();
        for attn in &out.attention {
            for &a in attn.data().iter() {
                assert!((a - 1.0 / hw as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_features_and_positions_reduce_to_residual_stack() {
        let (cfg, agent) = tiny();
        agent.embeddings.pos_feat.set_data(&vec![0.0; agent.embeddings.pos_feat.numel()]);
        let feat = Tensor::zeros(&[1, cfg.hw(), cfg.d]);
        // values are zero, so attention output is zero and the first
        // residual leaves Q0 unchanged before the FFN block
        let l0 = agent.embeddings.q0.broadcast_batch(1).unwrap();
        let (l1, _) = agent.layers[0].forward(&l0, &feat, &agent.embeddings).unwrap();
        let ffn_in = l0
            .layer_norm(&agent.layers[0].ln_gain, &agent.layers[0].ln_bias, 1e-5)
            .unwrap();
        let b_c_d = [1, 3, cfg.d];
        let expect = agent.layers[0]
            .ffn2
            .forward(
                &agent.layers[0]
                    .ffn1
                    .forward(&ffn_in.reshape(&[3, cfg.d]).unwrap())
                    .unwrap()
                    .relu(),
            )
            .unwrap()
            .reshape(&b_c_d)
            .unwrap()
            .add(&l0)
            .unwrap();
        let (a, b) = (l1.to_vec(), expect.to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_positions_with_pos_feat_leaves_output_unchanged() {
        let (cfg, agent) = tiny();
        let hw = cfg.hw();
        let feat = rand_feat(&cfg, 1, 13);
        let l0 = agent.embeddings.q0.broadcast_batch(1).unwrap();
        let (base, _) = agent.layers[0]
            .forward(&l0, &feat, &agent.embeddings)
            .unwrap();

        // rotate feature rows and pos_feat rows together
        let rotate = |v: Vec<f64>, d: usize| {
            let mut out = v.clone();
            out.rotate_left(d);
            out
        };
        let feat_rot = Tensor::leaf(rotate(feat.to_vec(), cfg.d), &[1, hw, cfg.d], false).unwrap();
        let orig_pos = agent.embeddings.pos_feat.to_vec();
        agent
            .embeddings
            .pos_feat
            .set_data(&rotate(orig_pos.clone(), cfg.d));
        let (rotated, _) = agent.layers[0]
            .forward(&l0, &feat_rot, &agent.embeddings)
            .unwrap();
        agent.embeddings.pos_feat.set_data(&orig_pos);

        for (a, b) in base.to_vec().iter().zip(rotated.to_vec()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (cfg, agent) = tiny();
        let feat = rand_feat(&cfg, 3, 5);
        let out = agent.forward(&feat).unwrap();
        let hw = cfg.hw();
        for attn in &out.attention {
            for row in attn.to_vec().chunks(hw) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn class_permutation_equivariance_is_exact() {
        let (cfg, agent) = tiny();
        let feat = rand_feat(&cfg, 2, 7);
        let base = agent.forward(&feat).unwrap().logits.to_vec();

        let perm = [2usize, 0, 1];
        let permute_rows = |t: &Tensor<f64>, d: usize| {
            let v = t.to_vec();
            let mut out = vec![0.0; v.len()];
            for (new_r, &old_r) in perm.iter().enumerate() {
                out[new_r * d..(new_r + 1) * d].copy_from_slice(&v[old_r * d..(old_r + 1) * d]);
            }
            out
        };
        agent.embeddings.q0.set_data(&permute_rows(&agent.embeddings.q0, cfg.d));
        agent
            .embeddings
            .pos_label
            .set_data(&permute_rows(&agent.embeddings.pos_label, cfg.d));
        agent.head_w.set_data(&permute_rows(&agent.head_w, cfg.d));
        agent.head_b.set_data(&permute_rows(&agent.head_b, 1));

        let permuted = agent.forward(&feat).unwrap().logits.to_vec();
        for b in 0..2 {
            for (new_c, &old_c) in perm.iter().enumerate() {
                assert_eq!(permuted[b * 3 + new_c], base[b * 3 + old_c]);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (cfg, agent) = tiny();
        let feat = rand_feat(&cfg, 2, 9);
        let a = agent.forward(&feat).unwrap().logits.to_vec();
        let b = agent.forward(&feat).unwrap().logits.to_vec();
        assert_eq!(a, b);
    }
}

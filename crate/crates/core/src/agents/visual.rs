//! Visual prior agent: the foreground attention block, a cascade of
//! channel-wise (squeeze-and-excitation) and position-wise gating over
//! backbone features, projected to a coarse ROI-attended feature map.

use rand_chacha::ChaCha8Rng;

use super::backbone::Backbone;
use super::layers::{ConvLayer, LinearLayer};
use crate::autodiff::{Scalar, Tensor};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub struct VisualAgent<S: Scalar> {
    backbone: Backbone<S>,
    se_fc1: LinearLayer<S>,
    se_fc2: LinearLayer<S>,
    pos_conv: ConvLayer<S>,
    proj: ConvLayer<S>,
    pub head: LinearLayer<S>,
    d: usize,
}

pub struct VisualOutput<S: Scalar> {
    /// `[B, HW, d]` ROI-attended map consumed by the decoder.
    pub attended_features: Tensor<S>,
    pub logits: Tensor<S>,
    pub probs: Tensor<S>,
    /// `[B, Ch]` sigmoid channel gates.
    pub channel_weights: Tensor<S>,
    /// `[B, 1, H', W']` sigmoid position map in [0,1].
    pub position_map: Tensor<S>,
}

impl<S: Scalar> VisualAgent<S> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<VisualAgent<S>> {
        cfg.validate()?;
        let ch = cfg.backbone.out_channels();
        if ch % cfg.se_reduction != 0 {
            return Err(Error::Config(format!(
                "se_reduction {} does not divide {ch} channels",
                cfg.se_reduction
            )));
        }
        let backbone = Backbone::new(rng, &cfg.backbone);
        let se_fc1 = LinearLayer::new(rng, ch, ch / cfg.se_reduction);
        let se_fc2 = LinearLayer::new(rng, ch / cfg.se_reduction, ch);
        let pos_conv = ConvLayer::new(rng, ch, 1, 1, 1, 0);
        // start the gate mostly closed so it opens only where evidence lives
        pos_conv.b.set_data(&[S::from_f64(-2.0)]);
        let proj = ConvLayer::new(rng, ch, cfg.d, 1, 1, 0);
        let head = LinearLayer::new(rng, cfg.d, cfg.classes);
        Ok(VisualAgent {
            backbone,
            se_fc1,
            se_fc2,
            pos_conv,
            proj,
            head,
            d: cfg.d,
        })
    }

    /// Squeeze-and-excitation: global average per channel, two-layer gate,
    /// input rescaled channel-wise.
    pub fn fab_channel_attention(
        &self,
        feature_map: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let squeeze = feature_map.global_avg_pool()?;
        let gates = self
            .se_fc2
            .forward(&self.se_fc1.forward(&squeeze)?.relu())?
            .sigmoid();
        let reweighted = feature_map.scale_channels(&gates)?;
        Ok((reweighted, gates))
    }

    /// 1x1 conv + sigmoid position map, broadcast-multiplied over channels.
    /// Cascade order is channel-then-position.
    pub fn fab_position_attention(
        &self,
        reweighted: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let position_map = self.pos_conv.forward(reweighted)?.sigmoid();
        let attended = reweighted.scale_spatial(&position_map)?;
        Ok((attended, position_map))
    }

    pub fn forward(&self, batch: &Tensor<S>) -> Result<VisualOutput<S>> {
        let base = self.backbone.forward(batch)?;
        let (reweighted, channel_weights) = self.fab_channel_attention(&base)?;
        let (attended, position_map) = self.fab_position_attention(&reweighted)?;
        let proj = self.proj.forward(&attended)?;
        let shape = proj.shape().to_vec();
        let (b, hw) = (shape[0], shape[2] * shape[3]);

        // Attention-normalized pooling, Σ(m·g)/Σm: only the shape of the
        // position map carries signal into the head, not its scale.
        let pooled = proj
            .global_avg_pool()?
            .mul_rows(&position_map.global_avg_pool()?.pow_scalar(-S::one()))?;
        let logits = self.head.forward(&pooled)?;
        let probs = logits.sigmoid();
        let attended_features = proj.reshape(&[b, self.d, hw])?.transpose_last2()?;

        Ok(VisualOutput {
            attended_features,
            logits,
            probs,
            channel_weights,
            position_map,
        })
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.backbone.params("visual.backbone", out);
        self.se_fc1.params("visual.se_fc1", out);
        self.se_fc2.params("visual.se_fc2", out);
        self.pos_conv.params("visual.pos_conv", out);
        self.proj.params("visual.proj", out);
        self.head.params("visual.head", out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{normal_vec, rng_for};

    fn tiny_agent() -> VisualAgent<f64> {
        VisualAgent::new(&mut rng_for(6, "vis"), &ModelConfig::tiny_for_checks(3)).unwrap()
    }

    #[test]
    fn zero_excitation_gives_half_gates() {
        let agent = tiny_agent();
        agent.se_fc1.w.set_data(&vec![0.0; agent.se_fc1.w.numel()]);
        agent.se_fc2.w.set_data(&vec![0.0; agent.se_fc2.w.numel()]);
        let fm = Tensor::leaf(
            normal_vec(&mut rng_for(1, "fm"), 1 * 8 * 2 * 2, 1.0),
            &[1, 8, 2, 2],
            false,
        )
        .unwrap();
        let (rw, gates) = agent.fab_channel_attention(&fm).unwrap();
        for &g in gates.data().iter() {
            assert!((g - 0.5).abs() < 1e-12);
        }
        for (o, i) in rw.data().iter().zip(fm.data().iter()) {
            assert!((o - 0.5 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn squeeze_of_constant_channel_is_that_constant() {
        let agent = tiny_agent();
        let mut vals = Vec::new();
        for c in 0..8 {
            vals.extend(std::iter::repeat(c as f64 * 0.1).take(4));
        }
        let fm = Tensor::leaf(vals, &[1, 8, 2, 2], false).unwrap();
        let squeeze = fm.global_avg_pool().unwrap();
        for (c, &s) in squeeze.data().iter().enumerate() {
            assert!((s - c as f64 * 0.1).abs() < 1e-12);
        }
        let _ = agent;
    }

    #[test]
    fn gates_invariant_under_spatial_permutation() {
        let agent = tiny_agent();
        let vals = normal_vec(&mut rng_for(2, "fm"), 8 * 4, 1.0);
        let fm = Tensor::leaf(vals.clone(), &[1, 8, 2, 2], false).unwrap();
        // Rotate each channel's four pixels.
        let mut rotated = vals.clone();
        for c in 0..8 {
            rotated[c * 4..(c + 1) * 4].rotate_left(1);
        }
        let fm_rot = Tensor::leaf(rotated, &[1, 8, 2, 2], false).unwrap();
        let (_, g1) = agent.fab_channel_attention(&fm).unwrap();
        let (_, g2) = agent.fab_channel_attention(&fm_rot).unwrap();
        assert_eq!(g1.to_vec(), g2.to_vec());
    }

    #[test]
    fn zero_position_weights_halve_the_input() {
        let agent = tiny_agent();
        agent
            .pos_conv
            .w
            .set_data(&vec![0.0; agent.pos_conv.w.numel()]);
        agent.pos_conv.b.set_data(&[0.0]);
        let fm = Tensor::leaf(
            normal_vec(&mut rng_for(3, "fm"), 8 * 4, 1.0),
            &[1, 8, 2, 2],
            false,
        )
        .unwrap();
        let (att, pmap) = agent.fab_position_attention(&fm).unwrap();
        assert_eq!(pmap.shape(), &[1, 1, 2, 2]);
        for &p in pmap.data().iter() {
            assert!((p - 0.5).abs() < 1e-12);
        }
        for (o, i) in att.data().iter().zip(fm.data().iter()) {
            assert!((o - 0.5 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_stays_zero_through_gating() {
        let agent = tiny_agent();
        let fm = Tensor::zeros(&[1, 8, 2, 2]);
        let (rw, _) = agent.fab_channel_attention(&fm).unwrap();
        let (att, _) = agent.fab_position_attention(&rw).unwrap();
        assert!(att.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_finiteness_with_random_params() {
        let agent = tiny_agent();
        let x = Tensor::leaf(
            normal_vec(&mut rng_for(4, "x"), 2 * 64, 1.0),
            &[2, 1, 8, 8],
            false,
        )
        .unwrap();
        let out = agent.forward(&x).unwrap();
        assert_eq!(out.attended_features.shape(), &[2, 4, 8]);
        assert!(out
            .attended_features
            .data()
            .iter()
            .all(|v| v.is_finite()));
        assert!(out.probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(out.position_map.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

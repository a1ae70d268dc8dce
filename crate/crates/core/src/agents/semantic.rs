//! Semantic prior agent: backbone features, three parallel multi-scale
//! convolutions (kernels 3/5/7) concatenated and projected to width `d`,
//! plus an independent per-class sigmoid classifier head.

use rand_chacha::ChaCha8Rng;

use super::backbone::Backbone;
use super::layers::{ConvLayer, LinearLayer};
use crate::autodiff::{Scalar, Tensor};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub struct SemanticAgent<S: Scalar> {
    backbone: Backbone<S>,
    branches: Vec<ConvLayer<S>>,
    proj: ConvLayer<S>,
    pub head: LinearLayer<S>,
    classes: usize,
    d: usize,
}

pub struct SemanticOutput<S: Scalar> {
    /// `[B, HW, d]` map consumed by the decoder.
    pub spatial_features: Tensor<S>,
    pub logits: Tensor<S>,
    /// `[B, C]` sigmoid probabilities, entries strictly in (0,1).
    pub probs: Tensor<S>,
    /// `[B, C, d]` detached per-class view of the pooled feature: the pooled
    /// vector gated by each class head row.
    pub per_class_features: Tensor<S>,
}

impl<S: Scalar> SemanticAgent<S> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<SemanticAgent<S>> {
        cfg.validate()?;
        let backbone = Backbone::new(rng, &cfg.backbone);
        let ch = cfg.backbone.out_channels();
        let branches = cfg
            .multiscale_kernels
            .iter()
            .map(|&k| ConvLayer::new(rng, ch, cfg.multiscale_channels, k, 1, k / 2))
            .collect::<Vec<_>>();
        let proj = ConvLayer::new(
            rng,
            cfg.multiscale_channels * cfg.multiscale_kernels.len(),
            cfg.d,
            1,
            1,
            0,
        );
        let head = LinearLayer::new(rng, cfg.d, cfg.classes);
        Ok(SemanticAgent {
            backbone,
            branches,
            proj,
            head,
            classes: cfg.classes,
            d: cfg.d,
        })
    }

    pub fn forward(&self, batch: &Tensor<S>) -> Result<SemanticOutput<S>> {
        if batch.shape().len() != 4 || batch.shape()[1] != 1 {
            return Err(Error::Shape {
                op: "semantic_forward",
                lhs: batch.shape().to_vec(),
                rhs: vec![0, 1, 0, 0],
            });
        }
        let base = self.backbone.forward(batch)?;
        let maps = self
            .branches
            .iter()
            .map(|br| Ok(br.forward(&base)?.relu()))
            .collect::<Result<Vec<_>>>()?;
        let cat = Tensor::concat(&maps, 1)?;
        let proj = self.proj.forward(&cat)?;
        let shape = proj.shape().to_vec();
        let (b, hw) = (shape[0], shape[2] * shape[3]);

        let pooled = proj.global_avg_pool()?;
        let logits = self.head.forward(&pooled)?;
        let probs = logits.sigmoid();
        let spatial_features = proj.reshape(&[b, self.d, hw])?.transpose_last2()?;

        // Detached report-only view: pooled gated by each class row.
        let mut pcf = Vec::with_capacity(b * self.classes * self.d);
        {
            let pd = pooled.data();
            let wd = self.head.w.data();
            for bi in 0..b {
                for c in 0..self.classes {
                    for j in 0..self.d {
                        pcf.push(pd[bi * self.d + j] * wd[c * self.d + j]);
                    }
                }
            }
        }
        let per_class_features = Tensor::leaf(pcf, &[b, self.classes, self.d], false)?;

        Ok(SemanticOutput {
            spatial_features,
            logits,
            probs,
            per_class_features,
        })
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.backbone.params("semantic.backbone", out);
        for (br, k) in self.branches.iter().zip([3usize, 5, 7]) {
            br.params(&format!("semantic.branch{k}"), out);
        }
        self.proj.params("semantic.proj", out);
        self.head.params("semantic.head", out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn tiny_agent() -> SemanticAgent<f64> {
        SemanticAgent::new(&mut rng_for(5, "sem"), &ModelConfig::tiny_for_checks(3)).unwrap()
    }

    #[test]
    fn zero_image_gives_half_probs() {
        let agent = tiny_agent();
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        let out = agent.forward(&x).unwrap();
        for &p in out.probs.data().iter() {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shapes_match_contract() {
        let agent = tiny_agent();
        let x = Tensor::zeros(&[3, 1, 8, 8]);
        let out = agent.forward(&x).unwrap();
        assert_eq!(out.spatial_features.shape(), &[3, 4, 8]);
        assert_eq!(out.probs.shape(), &[3, 3]);
        assert_eq!(out.per_class_features.shape(), &[3, 3, 8]);
    }

    #[test]
    fn duplicated_sample_gets_identical_outputs() {
        let agent = tiny_agent();
        let mut rng = rng_for(9, "img");
        let img: Vec<f64> = crate::util::normal_vec(&mut rng, 64, 1.0);
        let mut two = img.clone();
        two.extend_from_slice(&img);
        let x = Tensor::leaf(two, &[2, 1, 8, 8], false).unwrap();
        let out = agent.forward(&x).unwrap();
        let probs = out.probs.to_vec();
        assert_eq!(&probs[..3], &probs[3..]);
    }

    #[test]
    fn every_multiscale_branch_is_live() {
        let agent = tiny_agent();
        let mut rng = rng_for(11, "img");
        let img: Vec<f64> = crate::util::normal_vec(&mut rng, 64, 1.0);
        let x = Tensor::leaf(img, &[1, 1, 8, 8], false).unwrap();
        let base_logits = agent.forward(&x).unwrap().logits.to_vec();
        for bi in 0..agent.branches.len() {
            let w = &agent.branches[bi].w;
            let orig = w.to_vec();
            let bumped: Vec<f64> = orig.iter().map(|v| v + 0.3).collect();
            w.set_data(&bumped);
            let new_logits = agent.forward(&x).unwrap().logits.to_vec();
            w.set_data(&orig);
            assert_ne!(base_logits, new_logits, "branch {bi} had no effect");
        }
    }
}

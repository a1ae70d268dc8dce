//! Fusion of the prior agents' feature maps into the decoder's key/value
//! feature. The default is an elementwise sum of per-source linear
//! projections; a concat-and-project variant is selectable. Each source is
//! detachable so ablations can drop either agent.

use rand_chacha::ChaCha8Rng;

use crate::agents::layers::LinearLayer;
use crate::autodiff::{Scalar, Tensor};
use crate::config::{FusionKind, ModelConfig};
use crate::error::{Error, Result};

pub struct FeatureFusion<S: Scalar> {
    kind: FusionKind,
    proj_sem: LinearLayer<S>,
    proj_vis: LinearLayer<S>,
    proj_cat: Option<LinearLayer<S>>,
    d: usize,
}

impl<S: Scalar> FeatureFusion<S> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> FeatureFusion<S> {
        FeatureFusion {
            kind: cfg.fusion,
            proj_sem: LinearLayer::new(rng, cfg.d, cfg.d),
            proj_vis: LinearLayer::new(rng, cfg.d, cfg.d),
            proj_cat: match cfg.fusion {
                FusionKind::Concat => Some(LinearLayer::new(rng, 2 * cfg.d, cfg.d)),
                FusionKind::Sum => None,
            },
            d: cfg.d,
        }
    }

    fn project(&self, layer: &LinearLayer<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let s = x.shape().to_vec();
        layer
            .forward(&x.reshape(&[s[0] * s[1], s[2]])?)?
            .reshape(&[s[0], s[1], self.d])
    }

    /// Fuse whichever sources are present into `[B,HW,d]`.
    pub fn fuse(
        &self,
        semantic: Option<&Tensor<S>>,
        visual: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        match (semantic, visual) {
            (Some(s), Some(v)) => match self.kind {
                FusionKind::Sum => {
                    let ps = self.project(&self.proj_sem, s)?;
                    let pv = self.project(&self.proj_vis, v)?;
                    ps.add(&pv)
                }
                FusionKind::Concat => {
                    let cat = Tensor::concat(&[s.clone(), v.clone()], 2)?;
                    let sh = cat.shape().to_vec();
                    self.proj_cat
                        .as_ref()
                        .unwrap()
                        .forward(&cat.reshape(&[sh[0] * sh[1], sh[2]])?)?
                        .reshape(&[sh[0], sh[1], self.d])
                }
            },
            (Some(s), None) => self.project(&self.proj_sem, s),
            (None, Some(v)) => self.project(&self.proj_vis, v),
            (None, None) => Err(Error::Contract(
                "fusion: no feature source enabled".to_string(),
            )),
        }
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.proj_sem.params("diag.fuse.sem", out);
        self.proj_vis.params("diag.fuse.vis", out);
        if let Some(cat) = &self.proj_cat {
            cat.params("diag.fuse.cat", out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{normal_vec, rng_for};

    #[test]
    fn single_source_paths_work_and_differ() {
        let cfg = ModelConfig::tiny_for_checks(3);
        let fusion: FeatureFusion<f64> = FeatureFusion::new(&mut rng_for(1, "fuse"), &cfg);
        let hw = cfg.hw();
        let s = Tensor::leaf(
            normal_vec(&mut rng_for(2, "s"), hw * cfg.d, 1.0),
            &[1, hw, cfg.d],
            false,
        )
        .unwrap();
        let v = Tensor::leaf(
            normal_vec(&mut rng_for(3, "v"), hw * cfg.d, 1.0),
            &[1, hw, cfg.d],
            false,
        )
        .unwrap();
        let both = fusion.fuse(Some(&s), Some(&v)).unwrap();
        let only_s = fusion.fuse(Some(&s), None).unwrap();
        let only_v = fusion.fuse(None, Some(&v)).unwrap();
        assert_eq!(both.shape(), &[1, hw, cfg.d]);
        assert_ne!(both.to_vec(), only_s.to_vec());
        assert_ne!(only_s.to_vec(), only_v.to_vec());
        // sum fusion is exactly the sum of the single-source projections
        let summed: Vec<f64> = only_s
            .to_vec()
            .iter()
            .zip(only_v.to_vec())
            .map(|(a, b)| a + b)
            .collect();
        for (x, y) in both.to_vec().iter().zip(&summed) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(fusion.fuse(None, None).is_err());
    }
}

//! Small configurable CNN feature extractor shared by both prior agents.
//!
//! The default "tiny" configuration is four stride-2 3x3 conv blocks with
//! channels 16→32→64→64; a 64x64 input comes out as a 4x4 map. Deeper,
//! wider configurations (including max-pool downsampling) are definable
//! through [`BackboneConfig`] but nothing here depends on one.

use rand_chacha::ChaCha8Rng;

use super::layers::ConvLayer;
use crate::autodiff::{kernels::conv_out_extent, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Append a 2x2/stride-2 max pool after the last block.
    pub final_pool: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 2],
            final_pool: false,
        }
    }
}

impl BackboneConfig {
    /// A configuration small enough for 8x8 gradient-check runs.
    pub fn tiny_8px() -> BackboneConfig {
        BackboneConfig {
            channels: vec![4, 8],
            strides: vec![2, 2],
            final_pool: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "backbone: {} channel entries vs {} strides",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("backbone: zero stride".to_string()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Spatial extent of the output map for a square input.
    pub fn out_extent(&self, image_size: usize) -> usize {
        let mut e = image_size;
        for &s in &self.strides {
            e = conv_out_extent(e, 3, s, 1);
        }
        if self.final_pool {
            e = conv_out_extent(e, 2, 2, 0);
        }
        e
    }
}

pub struct Backbone<S: Scalar> {
    blocks: Vec<ConvLayer<S>>,
    final_pool: bool,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &BackboneConfig) -> Backbone<S> {
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut c_in = 1;
        for (&c_out, &stride) in cfg.channels.iter().zip(&cfg.strides) {
            blocks.push(ConvLayer::new(rng, c_in, c_out, 3, stride, 1));
            c_in = c_out;
        }
        Backbone {
            blocks,
            final_pool: cfg.final_pool,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h)?.relu();
        }
        if self.final_pool {
            h = h.max_pool(2, 2)?;
        }
        Ok(h)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.block{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn default_backbone_maps_64_to_4() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.out_extent(64), 4);
        let bb: Backbone<f32> = Backbone::new(&mut rng_for(0, "bb"), &cfg);
        let x = Tensor::zeros(&[2, 1, 64, 64]);
        let y = bb.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 64, 4, 4]);
    }

    #[test]
    fn tiny_backbone_handles_8px() {
        let cfg = BackboneConfig::tiny_8px();
        assert_eq!(cfg.out_extent(8), 2);
        let bb: Backbone<f64> = Backbone::new(&mut rng_for(0, "bb"), &cfg);
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert_eq!(bb.forward(&x).unwrap().shape(), &[1, 8, 2, 2]);
    }
}

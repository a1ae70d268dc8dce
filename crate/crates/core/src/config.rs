//! Model architecture configuration shared by the agents and the decoder.

use crate::agents::backbone::BackboneConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Elementwise sum of the projected prior features.
    Sum,
    /// Channel concatenation followed by a projection back to `d`.
    Concat,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; `None` means `4 * d`.
    pub ffn_width: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            heads: 4,
            ffn_width: None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub image_size: usize,
    /// Shared feature width.
    pub d: usize,
    pub backbone: BackboneConfig,
    pub multiscale_kernels: Vec<usize>,
    pub multiscale_channels: usize,
    pub se_reduction: usize,
    pub decoder: DecoderConfig,
    pub fusion: FusionKind,
}

impl ModelConfig {
    pub fn default_for(classes: usize, image_size: usize) -> ModelConfig {
        ModelConfig {
            classes,
            image_size,
            d: 64,
            backbone: BackboneConfig::default(),
            multiscale_kernels: vec![3, 5, 7],
            multiscale_channels: 32,
            se_reduction: 4,
            decoder: DecoderConfig::default(),
            fusion: FusionKind::Sum,
        }
    }

    /// Tiny all-around configuration for f64 gradient checks.
    pub fn tiny_for_checks(classes: usize) -> ModelConfig {
        ModelConfig {
            classes,
            image_size: 8,
            d: 8,
            backbone: BackboneConfig::tiny_8px(),
            multiscale_kernels: vec![3, 5, 7],
            multiscale_channels: 4,
            se_reduction: 2,
            decoder: DecoderConfig {
                layers: 1,
                heads: 2,
                ffn_width: Some(16),
            },
            fusion: FusionKind::Sum,
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.decoder.ffn_width.unwrap_or(4 * self.d)
    }

    /// Side length of the backbone output map.
    pub fn feature_extent(&self) -> usize {
        self.backbone.out_extent(self.image_size)
    }

    /// Number of spatial feature positions seen by the decoder.
    pub fn hw(&self) -> usize {
        let e = self.feature_extent();
        e * e
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.decoder.layers < 1 {
            return Err(Error::Config("decoder layers must be >= 1".to_string()));
        }
        if self.d % self.decoder.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} must be divisible by heads = {}",
                self.d, self.decoder.heads
            )));
        }
        if self.backbone.out_channels() % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "se_reduction {} must divide backbone channels {}",
                self.se_reduction,
                self.backbone.out_channels()
            )));
        }
        if self.feature_extent() == 0 {
            return Err(Error::Config(format!(
                "backbone reduces {}px input to nothing",
                self.image_size
            )));
        }
        if self.multiscale_kernels.is_empty() || self.multiscale_channels == 0 {
            return Err(Error::Config("multiscale branch config empty".to_string()));
        }
        Ok(())
    }
}

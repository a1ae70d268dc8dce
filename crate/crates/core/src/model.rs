//! The full agent bundle: optional prior agents feeding a fused state into
//! either the decoder-based diagnostic agent or a plain linear head, plus
//! the frozen target copy used for TD bootstrapping.
//!
//! Component toggles realize the ablation grid: with both prior agents off,
//! a bare backbone (no supervision of its own) still produces the state the
//! diagnostic side consumes.

use rand_chacha::ChaCha8Rng;

use crate::agents::backbone::Backbone;
use crate::agents::layers::{ConvLayer, LinearLayer};
use crate::agents::{SemanticAgent, SemanticOutput, VisualAgent, VisualOutput};
use crate::autodiff::{Scalar, Tensor};
use crate::config::ModelConfig;
use crate::diagnostic::{init_label_embeddings, DiagnosticAgent, FeatureFusion};
use crate::error::{Error, Result};
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ComponentToggles {
    pub semantic: bool,
    pub visual: bool,
    /// `false` replaces the decoder with a linear head over pooled state.
    pub decoder: bool,
}

impl Default for ComponentToggles {
    fn default() -> Self {
        ComponentToggles {
            semantic: true,
            visual: true,
            decoder: true,
        }
    }
}

/// Plain feature extractor used when both prior agents are disabled.
pub struct BareExtractor<S: Scalar> {
    backbone: Backbone<S>,
    proj: ConvLayer<S>,
    d: usize,
}

impl<S: Scalar> BareExtractor<S> {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> BareExtractor<S> {
        BareExtractor {
            backbone: Backbone::new(rng, &cfg.backbone),
            proj: ConvLayer::new(rng, cfg.backbone.out_channels(), cfg.d, 1, 1, 0),
            d: cfg.d,
        }
    }

    fn forward(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let f = self.proj.forward(&self.backbone.forward(batch)?)?;
        let s = f.shape().to_vec();
        f.reshape(&[s[0], self.d, s[2] * s[3]])?.transpose_last2()
    }

    fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.backbone.params("bare.backbone", out);
        self.proj.params("bare.proj", out);
    }
}

/// Output of the prior side for one batch.
pub struct PriorPass<S: Scalar> {
    /// Fused state feature `[B,HW,d]` the diagnostic side consumes.
    pub state: Tensor<S>,
    pub semantic: Option<SemanticOutput<S>>,
    pub visual: Option<VisualOutput<S>>,
}

/// Output of the diagnostic side.
pub struct DiagPass<S: Scalar> {
    pub logits: Tensor<S>,
    pub probs: Tensor<S>,
    /// `[B,C,d]` final fused features (decoder path only).
    pub fused: Option<Tensor<S>>,
    /// Per-layer `[B,heads,C,HW]` attention rows (decoder path only).
    pub attention: Vec<Tensor<S>>,
}

pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub toggles: ComponentToggles,
    pub semantic: Option<SemanticAgent<S>>,
    pub visual: Option<VisualAgent<S>>,
    pub bare: Option<BareExtractor<S>>,
    pub fusion: FeatureFusion<S>,
    pub decoder: Option<DiagnosticAgent<S>>,
    pub linear_head: Option<LinearLayer<S>>,
}

impl<S: Scalar> Model<S> {
    /// Build the bundle. Label embeddings start cold (seeded normal);
    /// [`Model::warm_start_embeddings`] re-derives `Q0` from the semantic
    /// head once priors are trained or loaded.
    pub fn new(cfg: &ModelConfig, toggles: ComponentToggles, seed: u64) -> Result<Model<S>> {
        cfg.validate()?;
        let semantic = if toggles.semantic {
            Some(SemanticAgent::new(&mut rng_for(seed, "init.semantic"), cfg)?)
        } else {
            None
        };
        let visual = if toggles.visual {
            Some(VisualAgent::new(&mut rng_for(seed, "init.visual"), cfg)?)
        } else {
            None
        };
        let bare = if !toggles.semantic && !toggles.visual {
            Some(BareExtractor::new(&mut rng_for(seed, "init.bare"), cfg))
        } else {
            None
        };
        let mut diag_rng = rng_for(seed, "init.diagnostic");
        let fusion = FeatureFusion::new(&mut diag_rng, cfg);
        let (decoder, linear_head) = if toggles.decoder {
            let embeds = init_label_embeddings::<S>(None, cfg, seed)?;
            (Some(DiagnosticAgent::new(&mut diag_rng, cfg, embeds)?), None)
        } else {
            (None, Some(LinearLayer::new(&mut diag_rng, cfg.d, cfg.classes)))
        };
        Ok(Model {
            cfg: cfg.clone(),
            toggles,
            semantic,
            visual,
            bare,
            fusion,
            decoder,
            linear_head,
        })
    }

    /// Re-derive `Q0` from the (trained or loaded) semantic class head.
    pub fn warm_start_embeddings(&mut self, seed: u64) -> Result<bool> {
        let (Some(sem), Some(dec)) = (&self.semantic, &self.decoder) else {
            return Ok(false);
        };
        let fresh = init_label_embeddings(Some(&sem.head.w), &self.cfg, seed)?;
        dec.embeddings.q0.set_data(&fresh.q0.to_vec());
        Ok(true)
    }

    /// Run the prior agents (or the bare extractor) and fuse their features.
    pub fn extract_state(&self, batch: &Tensor<S>) -> Result<PriorPass<S>> {
        let semantic = self
            .semantic
            .as_ref()
            .map(|a| a.forward(batch))
            .transpose()?;
        let visual = self.visual.as_ref().map(|a| a.forward(batch)).transpose()?;
        let state = match (&semantic, &visual) {
            (None, None) => self
                .bare
                .as_ref()
                .ok_or_else(|| Error::Contract("model: no feature source".to_string()))?
                .forward(batch)?,
            (s, v) => self.fusion.fuse(
                s.as_ref().map(|o| &o.spatial_features),
                v.as_ref().map(|o| &o.attended_features),
            )?,
        };
        Ok(PriorPass {
            state,
            semantic,
            visual,
        })
    }

    /// Diagnostic forward from a (possibly replayed) state feature.
    pub fn diagnose(&self, state: &Tensor<S>) -> Result<DiagPass<S>> {
        if let Some(dec) = &self.decoder {
            let out = dec.forward(state)?;
            Ok(DiagPass {
                logits: out.logits,
                probs: out.probs,
                fused: Some(out.fused),
                attention: out.attention,
            })
        } else {
            let head = self.linear_head.as_ref().unwrap();
            let s = state.shape().to_vec();
            let pooled = state
                .transpose_last2()?
                .reshape(&[s[0], self.cfg.d, s[1], 1])?
                .global_avg_pool()?;
            let logits = head.forward(&pooled)?;
            let probs = logits.sigmoid();
            Ok(DiagPass {
                logits,
                probs,
                fused: None,
                attention: Vec::new(),
            })
        }
    }

    /// Parameters of the prior agents (and the bare extractor).
    pub fn prior_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        if let Some(s) = &self.semantic {
            s.params(&mut out);
        }
        if let Some(v) = &self.visual {
            v.params(&mut out);
        }
        if let Some(b) = &self.bare {
            b.params(&mut out);
        }
        out
    }

    /// Parameters of the diagnostic side (fusion, decoder or linear head).
    pub fn diag_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.fusion.params(&mut out);
        if let Some(d) = &self.decoder {
            d.params(&mut out);
        }
        if let Some(h) = &self.linear_head {
            h.params("diag.linear_head", &mut out);
        }
        out
    }

    pub fn all_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = self.diag_params();
        out.extend(self.prior_params());
        out
    }

    /// Build a frozen copy of the diagnostic side for TD targets.
    pub fn build_target(&self) -> Result<TargetCopy<S>> {
        let mut rng = rng_for(0, "init.target");
        let fusion = FeatureFusion::new(&mut rng, &self.cfg);
        let (decoder, linear_head) = if self.toggles.decoder {
            let embeds = init_label_embeddings::<S>(None, &self.cfg, 0)?;
            (
                Some(DiagnosticAgent::new(&mut rng, &self.cfg, embeds)?),
                None,
            )
        } else {
            (
                None,
                Some(LinearLayer::new(&mut rng, self.cfg.d, self.cfg.classes)),
            )
        };
        let mut target = TargetCopy {
            cfg: self.cfg.clone(),
            fusion,
            decoder,
            linear_head,
            syncs: 0,
        };
        target.sync_from(self)?;
        target.syncs = 0;
        Ok(target)
    }
}

/// Frozen copy of the diagnostic parameters (`w_{t-1}` in the TD target).
pub struct TargetCopy<S: Scalar> {
    cfg: ModelConfig,
    fusion: FeatureFusion<S>,
    decoder: Option<DiagnosticAgent<S>>,
    linear_head: Option<LinearLayer<S>>,
    /// Number of syncs performed (ablation counters check this stays 0).
    pub syncs: usize,
}

impl<S: Scalar> TargetCopy<S> {
    pub fn params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.fusion.params(&mut out);
        if let Some(d) = &self.decoder {
            d.params(&mut out);
        }
        if let Some(h) = &self.linear_head {
            h.params("diag.linear_head", &mut out);
        }
        out
    }

    /// `target := exact copy of the live diagnostic parameters`. Idempotent.
    pub fn sync_from(&mut self, model: &Model<S>) -> Result<()> {
        let live = model.diag_params();
        let mine = self.params();
        if live.len() != mine.len() {
            return Err(Error::Contract(format!(
                "target sync: {} live tensors vs {} target tensors",
                live.len(),
                mine.len()
            )));
        }
        for ((ln, lt), (mn, mt)) in live.iter().zip(&mine) {
            if ln != mn || lt.shape() != mt.shape() {
                return Err(Error::Contract(format!(
                    "target sync: mismatched record {ln} vs {mn}"
                )));
            }
            mt.set_data(&lt.data());
        }
        self.syncs += 1;
        Ok(())
    }

    /// Q logits for a stored state, used to form TD targets.
    pub fn logits_for_state(&self, state: &Tensor<S>) -> Result<Tensor<S>> {
        if let Some(dec) = &self.decoder {
            Ok(dec.forward(state)?.logits)
        } else {
            let head = self.linear_head.as_ref().unwrap();
            let s = state.shape().to_vec();
            let pooled = state
                .transpose_last2()?
                .reshape(&[s[0], self.cfg.d, s[1], 1])?
                .global_avg_pool()?;
            head.forward(&pooled)
        }
    }
}

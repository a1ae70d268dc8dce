//! Flat JSON run configuration. Unknown fields are rejected so typos surface
//! as field-precise errors; CLI flags override individual fields after parse.

use std::path::{Path, PathBuf};

use crate::agents::backbone::BackboneConfig;
use crate::config::{DecoderConfig, FusionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::model::ComponentToggles;
use crate::rl::RlConfig;

fn d_true() -> bool {
    true
}
fn d_64() -> usize {
    64
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    4
}
fn d_channels() -> Vec<usize> {
    vec![16, 32, 64, 64]
}
fn d_strides() -> Vec<usize> {
    vec![2, 2, 2, 2]
}
fn d_kernels() -> Vec<usize> {
    vec![3, 5, 7]
}
fn d_ms_channels() -> usize {
    32
}
fn d_se() -> usize {
    4
}
fn d_fusion() -> FusionKind {
    FusionKind::Sum
}
fn d_gamma() -> f64 {
    0.9
}
fn d_tau() -> f64 {
    0.5
}
fn d_one() -> f64 {
    1.0
}
fn d_gamma_neg() -> f64 {
    1.0
}
fn d_eps_min() -> f64 {
    0.2
}
fn d_capacity() -> usize {
    2048
}
fn d_lr() -> f64 {
    1e-3
}
fn d_wd() -> f64 {
    1e-2
}
fn d_batch() -> usize {
    16
}
fn d_epochs() -> usize {
    20
}
fn d_steps() -> usize {
    1
}
fn d_resamples() -> usize {
    1000
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // data
    pub train_manifest: PathBuf,
    /// Validation split, evaluated every epoch.
    pub eval_manifest: PathBuf,
    /// Optional held-out test split, also evaluated every epoch.
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    #[serde(default)]
    pub prior_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub overwrite: bool,

    // model
    pub classes: usize,
    pub image_size: usize,
    #[serde(default = "d_64")]
    pub d: usize,
    #[serde(default = "d_layers")]
    pub decoder_layers: usize,
    #[serde(default = "d_heads")]
    pub decoder_heads: usize,
    #[serde(default)]
    pub ffn_width: Option<usize>,
    #[serde(default = "d_channels")]
    pub backbone_channels: Vec<usize>,
    #[serde(default = "d_strides")]
    pub backbone_strides: Vec<usize>,
    #[serde(default)]
    pub backbone_final_pool: bool,
    #[serde(default = "d_kernels")]
    pub multiscale_kernels: Vec<usize>,
    #[serde(default = "d_ms_channels")]
    pub multiscale_channels: usize,
    #[serde(default = "d_se")]
    pub se_reduction: usize,
    #[serde(default = "d_fusion")]
    pub fusion: FusionKind,

    // component toggles (the ablation grid)
    #[serde(default = "d_true")]
    pub semantic_enabled: bool,
    #[serde(default = "d_true")]
    pub visual_enabled: bool,
    #[serde(default = "d_true")]
    pub decoder_enabled: bool,
    #[serde(default = "d_true")]
    pub rl_enabled: bool,
    /// Initialize `Q0` from the semantic class head (after priors load).
    #[serde(default = "d_true")]
    pub warm_start_embeddings: bool,

    // rl
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_one")]
    pub lambda_p: f64,
    #[serde(default = "d_one")]
    pub lambda_ptd: f64,
    #[serde(default = "d_one")]
    pub lambda_td: f64,
    #[serde(default = "d_one")]
    pub lambda_d: f64,
    #[serde(default)]
    pub gamma_pos: f64,
    #[serde(default = "d_gamma_neg")]
    pub gamma_neg: f64,
    #[serde(default = "d_eps_min")]
    pub eps_min: f64,
    /// Defaults to the run's total optimizer steps.
    #[serde(default)]
    pub epsilon_total_steps: Option<usize>,
    #[serde(default = "d_capacity")]
    pub replay_capacity: usize,
    /// Defaults to `batch_size`.
    #[serde(default)]
    pub replay_batch: Option<usize>,
    /// `None` syncs the target copy once per episode.
    #[serde(default)]
    pub target_sync_steps: Option<usize>,

    // optimizer / loop
    #[serde(default = "d_lr")]
    pub lr_max: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_steps")]
    pub steps_per_episode: usize,
    pub seed: u64,
    /// Strictly separate diagnostic and prior updates (ablation switch).
    #[serde(default)]
    pub separate_updates: bool,
    #[serde(default = "d_resamples")]
    pub bootstrap_resamples: usize,
    /// Stop once validation mean AUC reaches this value.
    #[serde(default)]
    pub early_stop_auc: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            classes: self.classes,
            image_size: self.image_size,
            d: self.d,
            backbone: BackboneConfig {
                channels: self.backbone_channels.clone(),
                strides: self.backbone_strides.clone(),
                final_pool: self.backbone_final_pool,
            },
            multiscale_kernels: self.multiscale_kernels.clone(),
            multiscale_channels: self.multiscale_channels,
            se_reduction: self.se_reduction,
            decoder: DecoderConfig {
                layers: self.decoder_layers,
                heads: self.decoder_heads,
                ffn_width: self.ffn_width,
            },
            fusion: self.fusion,
        }
    }

    pub fn toggles(&self) -> ComponentToggles {
        ComponentToggles {
            semantic: self.semantic_enabled,
            visual: self.visual_enabled,
            decoder: self.decoder_enabled,
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            gamma: self.gamma,
            tau: self.tau,
            lambda_p: self.lambda_p,
            lambda_ptd: self.lambda_ptd,
            lambda_td: self.lambda_td,
            lambda_d: self.lambda_d,
            target_sync_steps: self.target_sync_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.rl_config().validate()?;
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::Config("focal exponents must be >= 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.eps_min) {
            return Err(Error::Config(format!(
                "eps_min must be in [0,1], got {}",
                self.eps_min
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_episode == 0 {
            return Err(Error::Config(
                "batch_size, epochs and steps_per_episode must be positive".to_string(),
            ));
        }
        if !self.train_manifest.is_file() {
            return Err(Error::Config(format!(
                "train_manifest not found: {}",
                self.train_manifest.display()
            )));
        }
        if !self.eval_manifest.is_file() {
            return Err(Error::Config(format!(
                "eval_manifest not found: {}",
                self.eval_manifest.display()
            )));
        }
        if let Some(t) = &self.test_manifest {
            if !t.is_file() {
                return Err(Error::Config(format!(
                    "test_manifest not found: {}",
                    t.display()
                )));
            }
        }
        if let Some(p) = &self.prior_checkpoint {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "prior_checkpoint not found: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

/// Minimal valid config used as a template by the CLI and tests.
pub fn template(train: &Path, eval: &Path, out: &Path, classes: usize, image_size: usize, seed: u64) -> RunConfig {
    RunConfig {
        train_manifest: train.to_path_buf(),
        eval_manifest: eval.to_path_buf(),
        test_manifest: None,
        prior_checkpoint: None,
        out_dir: out.to_path_buf(),
        overwrite: false,
        classes,
        image_size,
        d: d_64(),
        decoder_layers: d_layers(),
        decoder_heads: d_heads(),
        ffn_width: None,
        backbone_channels: d_channels(),
        backbone_strides: d_strides(),
        backbone_final_pool: false,
        multiscale_kernels: d_kernels(),
        multiscale_channels: d_ms_channels(),
        se_reduction: d_se(),
        fusion: d_fusion(),
        semantic_enabled: true,
        visual_enabled: true,
        decoder_enabled: true,
        rl_enabled: true,
        warm_start_embeddings: true,
        gamma: d_gamma(),
        tau: d_tau(),
        lambda_p: 1.0,
        lambda_ptd: 1.0,
        lambda_td: 1.0,
        lambda_d: 1.0,
        gamma_pos: 0.0,
        gamma_neg: 1.0,
        eps_min: d_eps_min(),
        epsilon_total_steps: None,
        replay_capacity: d_capacity(),
        replay_batch: None,
        target_sync_steps: None,
        lr_max: d_lr(),
        weight_decay: d_wd(),
        batch_size: d_batch(),
        epochs: d_epochs(),
        steps_per_episode: d_steps(),
        seed,
        separate_updates: false,
        bootstrap_resamples: d_resamples(),
        early_stop_auc: None,
    }
}

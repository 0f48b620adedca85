//! Run configuration: a flat key = value file (TOML scalars), every field
//! defaulted, unknown keys rejected. The resolved config is embedded in
//! checkpoints and JSON reports for provenance.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data
    pub seed: u64,
    pub scenes: u32,
    pub two_hands: bool,
    pub occlusion_level: f64,

    // model
    pub channels: usize,
    pub heatmap_sigma: f64,
    pub peak_threshold: f64,
    pub max_tokens: usize,
    pub gamma_px: f64,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub queries: usize,
    pub ffn_dim: usize,
    pub pose_gain: f64,

    // loss weights
    pub w_heatmap: f64,
    pub w_joints: f64,
    pub w_translation: f64,
    pub w_hand_pose: f64,
    pub w_object_pose: f64,

    // optimizer
    pub lr: f64,
    pub iterations: u64,
    pub clip_norm: f64,

    // ablation switches
    pub use_ciet: bool,
    pub use_sigmoid_attention: bool,

    // evaluation
    pub auc_max: f64,
    pub auc_steps: usize,

    // gradient audit
    pub gradcheck_samples: usize,
    pub gradcheck_step: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            scenes: 64,
            two_hands: true,
            occlusion_level: 0.25,
            channels: 64,
            heatmap_sigma: 1.5,
            peak_threshold: 0.5,
            max_tokens: 128,
            gamma_px: 3.0,
            enc_layers: 3,
            dec_layers: 3,
            heads: 1,
            queries: 64,
            ffn_dim: 256,
            pose_gain: 100.0,
            w_heatmap: 1.0,
            w_joints: 1.0,
            w_translation: 1.0,
            w_hand_pose: 1.0,
            w_object_pose: 1.0,
            lr: 1e-3,
            iterations: 2000,
            clip_norm: 10.0,
            use_ciet: true,
            use_sigmoid_attention: true,
            auc_max: 50.0,
            auc_steps: 100,
            gradcheck_samples: 6,
            gradcheck_step: 1e-6,
        }
    }
}

impl RunConfig {
    /// Reduced preset for the gradient audit: same architecture, small
    /// dimensions so the sampled central-difference sweep stays fast. The
    /// heatmap weight is scaled down because central differences on the
    /// raw ~1e4-magnitude heatmap sum lose the small-gradient groups to
    /// f64 cancellation; the audited graph is unchanged.
    pub fn gradcheck_default() -> Self {
        RunConfig {
            channels: 8,
            enc_layers: 1,
            dec_layers: 1,
            queries: 8,
            ffn_dim: 64,
            max_tokens: 32,
            scenes: 1,
            w_heatmap: 1e-3,
            ..RunConfig::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.channels < 2 || self.channels % 2 != 0 {
            return err(format!("channels must be even and >= 2, got {}", self.channels));
        }
        if !(0.0..=1.0).contains(&self.occlusion_level) {
            return err(format!("occlusion_level must be in [0, 1], got {}", self.occlusion_level));
        }
        if self.heads == 0 || crate::EMBED_DIM % self.heads != 0 {
            return err(format!("heads must divide {}, got {}", crate::EMBED_DIM, self.heads));
        }
        if self.queries == 0 {
            return err("queries must be positive".into());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return err("encoder and decoder need at least one layer".into());
        }
        if self.heatmap_sigma <= 0.0 {
            return err(format!("heatmap_sigma must be positive, got {}", self.heatmap_sigma));
        }
        if self.gamma_px <= 0.0 {
            return err(format!("gamma_px must be positive, got {}", self.gamma_px));
        }
        if self.lr <= 0.0 || self.clip_norm <= 0.0 {
            return err("lr and clip_norm must be positive".into());
        }
        if self.auc_max <= 0.0 || self.auc_steps == 0 {
            return err("auc_max and auc_steps must be positive".into());
        }
        if self.gradcheck_samples == 0 || self.gradcheck_step <= 0.0 {
            return err("gradcheck_samples and gradcheck_step must be positive".into());
        }
        if self.max_tokens == 0 {
            return err("max_tokens must be positive".into());
        }
        Ok(())
    }

    /// Fields that must match between a checkpoint and a requested config
    /// for the parameters to be compatible.
    pub fn architecture_fingerprint(&self) -> String {
        format!(
            "c{}_e{}_d{}_h{}_q{}_f{}",
            self.channels, self.enc_layers, self.dec_layers, self.heads, self.queries, self.ffn_dim
        )
    }

    pub fn loss_weights(&self) -> crate::losses::LossWeights {
        crate::losses::LossWeights {
            heatmap: self.w_heatmap,
            joints: self.w_joints,
            translation: self.w_translation,
            hand_pose: self.w_hand_pose,
            object_pose: self.w_object_pose,
        }
    }

    pub fn scene_config(&self) -> crate::synthdata::SceneConfig {
        crate::synthdata::SceneConfig {
            two_hands: self.two_hands,
            occlusion_level: self.occlusion_level,
        }
    }
}

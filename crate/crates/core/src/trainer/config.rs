//! Training configuration, read from TOML:
//!
//! ```toml
//! stage = "predictor"
//! epochs = 30
//! batch_size = 32
//! learning_rate = 1e-3
//! seed = 0
//! early_stop_patience = 10
//!
//! [loss_weights]
//! mesh_ce = 1.0
//! rot = 1.0
//! reproj = 1.0
//! recon_3d = 0.0
//!
//! [ablation]
//! loss_3d = false
//! no_reprojection = false
//! ```
//!
//! Optional `[codec]` and `[model]` tables override the architecture presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{LogitHead, ModelConfig};
use crate::vqvae::CodecConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Codec,
    Predictor,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "codec" => Ok(Stage::Codec),
            "predictor" => Ok(Stage::Predictor),
            _ => Err(config_err!("unknown stage `{s}` (expected codec or predictor)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mesh_ce: f64,
    pub rot: f64,
    pub reproj: f64,
    pub recon_3d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mesh_ce: 1.0,
            rot: 1.0,
            reproj: 1.0,
            recon_3d: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Replace the token cross-entropy with a vertex loss through a soft
    /// codebook mixture.
    pub loss_3d: bool,
    /// Drop the reprojection loss.
    pub no_reprojection: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub grad_clip: f64,
    pub loss_weights: LossWeights,
    pub ablation: AblationFlags,
    pub logit_head: LogitHead,
    /// Codec epochs trained without quantization before the k-means
    /// codebook initialization.
    pub codec_warmup_epochs: usize,
    pub kmeans_iterations: usize,
    /// Stop after this many optimizer steps per epoch (0 = full epochs).
    pub max_steps_per_epoch: usize,
    pub deterministic: bool,
    pub codec: Option<CodecConfig>,
    pub model: Option<ModelConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Predictor,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
            early_stop_patience: 10,
            grad_clip: 1.0,
            loss_weights: LossWeights::default(),
            ablation: AblationFlags::default(),
            logit_head: LogitHead::Mlp,
            codec_warmup_epochs: 1,
            kmeans_iterations: 15,
            max_steps_per_epoch: 0,
            deterministic: false,
            codec: None,
            model: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale codec schedule.
    pub fn desk_codec() -> Self {
        TrainConfig {
            stage: Stage::Codec,
            epochs: 12,
            batch_size: 32,
            learning_rate: 2e-3,
            ..Default::default()
        }
    }

    /// Desk-scale predictor schedule.
    pub fn desk_predictor() -> Self {
        TrainConfig {
            stage: Stage::Predictor,
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    /// Applies an ablation by name (`loss_3d` or `no_reprojection`),
    /// adjusting the loss weights to match.
    pub fn with_ablation(mut self, name: &str) -> Result<Self> {
        match name {
            "loss_3d" => {
                self.ablation.loss_3d = true;
                self.loss_weights.mesh_ce = 0.0;
                if self.loss_weights.recon_3d == 0.0 {
                    self.loss_weights.recon_3d = 1.0;
                }
            }
            "no_reprojection" => {
                self.ablation.no_reprojection = true;
                self.loss_weights.reproj = 0.0;
            }
            "none" => {}
            _ => return Err(config_err!("unknown ablation `{name}` (expected loss_3d or no_reprojection)")),
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive"));
        }
        let w = &self.loss_weights;
        if [w.mesh_ce, w.rot, w.reproj, w.recon_3d].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(config_err!("loss weights must be finite and non-negative"));
        }
        if self.ablation.loss_3d && w.mesh_ce > 0.0 {
            return Err(config_err!("the loss_3d ablation replaces the token cross-entropy; set loss_weights.mesh_ce = 0"));
        }
        if !self.ablation.loss_3d && w.recon_3d > 0.0 {
            return Err(config_err!("loss_weights.recon_3d is only used by the loss_3d ablation"));
        }
        if self.ablation.no_reprojection && w.reproj > 0.0 {
            return Err(config_err!("the no_reprojection ablation needs loss_weights.reproj = 0"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Runtime(format!("cannot serialize config: {e}")))
    }

    /// True when `MESHTOK_DETERMINISTIC=1` or the config asks for it.
    pub fn deterministic_mode(&self) -> bool {
        self.deterministic || std::env::var("MESHTOK_DETERMINISTIC").is_ok_and(|v| v == "1")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = TrainConfig::from_toml("stage = \"codec\"\nepochs = 3\n").unwrap();
        assert_eq!(cfg.stage, Stage::Codec);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.early_stop_patience, 10);
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn inconsistent_flags_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.ablation.loss_3d = true;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig::default().with_ablation("loss_3d").unwrap();
        assert!(cfg.validate().is_ok());
        let cfg = TrainConfig::default().with_ablation("no_reprojection").unwrap();
        assert!(cfg.validate().is_ok());
        assert!(TrainConfig::default().with_ablation("bogus").is_err());
        assert!(TrainConfig::from_toml("epochs = 0").is_err());
    }
}

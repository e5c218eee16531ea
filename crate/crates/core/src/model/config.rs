use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitHead {
    /// Per-token MLP over `[z_feat, embed(R̂, π̂)]`.
    #[default]
    Mlp,
    /// Self-attention across the conditioned mesh features, then a linear map.
    SelfAttention,
}

impl std::str::FromStr for LogitHead {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(LogitHead::Mlp),
            "self_attention" => Ok(LogitHead::SelfAttention),
            _ => Err(config_err!("unknown logit head `{s}` (expected mlp or self_attention)")),
        }
    }
}

impl LogitHead {
    pub fn name(self) -> &'static str {
        match self {
            LogitHead::Mlp => "mlp",
            LogitHead::SelfAttention => "self_attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    /// Output channels of the stride-2 stages of each feature extractor.
    pub extractor_channels: Vec<usize>,
    /// Hidden size `D`.
    pub hidden_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub feedforward_dim: usize,
    /// Width of the rotation/camera MLP.
    pub regressor_width: usize,
    /// Size of the (R̂, π̂) embedding fed to the logit head.
    pub condition_dim: usize,
    pub logit_head: LogitHead,
    /// Number of mesh tokens `N`; must match the codec.
    pub tokens: usize,
    /// Codebook size `S`; must match the codec.
    pub codebook_size: usize,
    /// Camera scale when the raw head output is zero.
    pub camera_scale_prior: f64,
    /// Feed the rotation/camera MLP the flattened feature grid instead of
    /// its spatial mean.
    #[serde(default)]
    pub rotation_from_grid: bool,
}

impl ModelConfig {
    pub fn desk(tokens: usize, codebook_size: usize) -> Self {
        ModelConfig {
            image_size: 64,
            image_channels: 1,
            extractor_channels: vec![16, 32, 64, 128],
            hidden_dim: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            feedforward_dim: 256,
            regressor_width: 256,
            condition_dim: 32,
            logit_head: LogitHead::Mlp,
            tokens,
            codebook_size,
            camera_scale_prior: 0.85,
            rotation_from_grid: true,
        }
    }

    /// Full-size layout: a 224×224 RGB input reduced to a 7×7×2048 grid, D=512.
    pub fn full() -> Self {
        ModelConfig {
            image_size: 224,
            image_channels: 3,
            extractor_channels: vec![64, 128, 256, 512, 2048],
            hidden_dim: 512,
            heads: 8,
            encoder_layers: 3,
            decoder_layers: 3,
            feedforward_dim: 1024,
            regressor_width: 1024,
            condition_dim: 64,
            logit_head: LogitHead::Mlp,
            tokens: 54,
            codebook_size: 512,
            camera_scale_prior: 0.9,
            rotation_from_grid: false,
        }
    }

    /// Side length of the feature grid.
    pub fn grid_size(&self) -> usize {
        let mut s = self.image_size;
        for _ in &self.extractor_channels {
            s = s.div_ceil(2);
        }
        s
    }

    pub fn feature_channels(&self) -> usize {
        self.extractor_channels.last().copied().unwrap_or(self.image_channels)
    }

    /// Input width of the rotation/camera MLP, without the initial pose.
    pub fn rotation_feature_dim(&self) -> usize {
        if self.rotation_from_grid {
            self.feature_channels() * self.grid_size() * self.grid_size()
        } else {
            self.feature_channels()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_channels == 0 || self.extractor_channels.is_empty() {
            return Err(config_err!("image size, image channels and extractor stages must be positive"));
        }
        if self.extractor_channels.contains(&0) {
            return Err(config_err!("extractor channel counts must be positive"));
        }
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(config_err!(
                "hidden_dim ({}) must be a positive multiple of heads ({})",
                self.hidden_dim,
                self.heads
            ));
        }
        if self.tokens == 0 || self.codebook_size < 2 {
            return Err(config_err!("need at least one token and two codebook entries"));
        }
        if self.feedforward_dim == 0 || self.regressor_width == 0 || self.condition_dim == 0 {
            return Err(config_err!("layer widths must be positive"));
        }
        if !(self.camera_scale_prior > 0.0 && self.camera_scale_prior.is_finite()) {
            return Err(config_err!("camera_scale_prior must be positive"));
        }
        Ok(())
    }
}

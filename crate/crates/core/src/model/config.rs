use serde::{Deserialize, Serialize};

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateConfig {
    Sphere,
    /// Triangle mesh with texture coordinates, read from an OBJ file.
    Obj(String),
}

/// Architecture hyperparameters. Everything needed to rebuild the network
/// layout; weights and surface samples live in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input images are square with this side length.
    pub image_size: usize,
    pub patch: usize,
    /// Token width `D`.
    pub dim: usize,
    pub vit_blocks: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Latent grid `[H_l, W_l]`.
    pub latent: [usize; 2],
    pub expr_dim: usize,
    pub expr_tokens: usize,
    pub expr_hidden: usize,
    pub expr_layers: usize,
    pub up_levels: usize,
    /// Channel count of the feature stream in the upsampler.
    pub up_width: usize,
    /// Extra nearest-neighbour enlargement of the attribute map (1 or 2).
    pub map_upsample_extra: usize,
    pub gaussians: usize,
    pub pe_freqs: usize,
    pub ffn_mult: usize,
    pub head_hidden: usize,
    pub template: TemplateConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            dim: 128,
            vit_blocks: 2,
            encoder_blocks: 2,
            decoder_blocks: 2,
            latent: [8, 8],
            expr_dim: 8,
            expr_tokens: 4,
            expr_hidden: 64,
            expr_layers: 2,
            up_levels: 2,
            up_width: 32,
            map_upsample_extra: 1,
            gaussians: 2048,
            pe_freqs: 6,
            ffn_mult: 2,
            head_hidden: 32,
            template: TemplateConfig::Sphere,
        }
    }

    /// Full-size hyperparameters: 512px input, 16px patches, width 768, eight
    /// encoder and decoder attention layers, a 32x32 code, 135-dim expressions
    /// through a 2x256 ReLU MLP and about 58k Gaussians.
    pub fn paper() -> Self {
        Self {
            image_size: 512,
            patch: 16,
            dim: 768,
            vit_blocks: 2,
            encoder_blocks: 8,
            decoder_blocks: 8,
            latent: [32, 32],
            expr_dim: 135,
            expr_tokens: 4,
            expr_hidden: 256,
            expr_layers: 2,
            up_levels: 2,
            up_width: 64,
            map_upsample_extra: 1,
            gaussians: 58_000,
            pe_freqs: 6,
            ffn_mult: 4,
            head_hidden: 64,
            template: TemplateConfig::Sphere,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk-scale" => Some(Self::desk()),
            "paper-scale" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn latent_len(&self) -> usize {
        self.latent[0] * self.latent[1]
    }

    /// Channels of the attribute map after all pixel shuffles.
    pub fn map_channels(&self) -> usize {
        self.dim >> (2 * self.up_levels)
    }

    /// Side lengths `[H, W]` of the attribute map that is grid-sampled.
    pub fn map_size(&self) -> [usize; 2] {
        let f = (1 << self.up_levels) * self.map_upsample_extra;
        [self.latent[0] * f, self.latent[1] * f]
    }

    /// Starting log-scale of predicted Gaussians: a fraction of the mean
    /// spacing of `G` points spread over the unit sphere.
    pub fn base_log_scale(&self) -> f64 {
        (0.7 * (4.0 * std::f64::consts::PI / self.gaussians as f64).sqrt()).ln()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let fail = |msg: String| Err(TensorError::Config { op: "model config", msg });
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return fail(format!("image size {} is not divisible by patch {}", self.image_size, self.patch));
        }
        let heads = super::layers::head_count(self.dim);
        if self.dim == 0 || self.dim % heads != 0 {
            return fail(format!("width {} is not divisible into {heads} heads", self.dim));
        }
        if self.up_levels == 0 || self.dim % (1 << (2 * self.up_levels)) != 0 {
            return fail(format!("width {} is not divisible by 4^{}", self.dim, self.up_levels));
        }
        if !matches!(self.map_upsample_extra, 1 | 2) {
            return fail(format!("map_upsample_extra must be 1 or 2, got {}", self.map_upsample_extra));
        }
        if self.latent.contains(&0) {
            return fail("latent grid must be non-empty".into());
        }
        let counts = [
            ("expr_dim", self.expr_dim),
            ("expr_tokens", self.expr_tokens),
            ("expr_hidden", self.expr_hidden),
            ("gaussians", self.gaussians),
            ("pe_freqs", self.pe_freqs),
            ("ffn_mult", self.ffn_mult),
            ("head_hidden", self.head_hidden),
            ("up_width", self.up_width),
        ];
        for (name, v) in counts {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.expr_layers < 1 {
            return fail("expr_layers must be at least 1".into());
        }
        if self.pe_freqs > 30 {
            return fail(format!("pe_freqs {} is too large", self.pe_freqs));
        }
        Ok(())
    }
}

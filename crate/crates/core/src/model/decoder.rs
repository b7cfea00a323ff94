use rand::Rng;

use super::layers::{normal_tensor, AttentionBlock, Conv2d, Linear};
use super::params::{ParamId, ParamStore};
use super::{DecodeMode, ModelConfig};
use crate::geometry::SurfaceSamples;
use crate::raster::GaussianSet;
use crate::tensor::{Float, Result, Tensor, TensorError};

/// Maximum displacement of a Gaussian from its template point.
pub const OFFSET_SCALE: f64 = 0.05;
/// Opacity logit of a Gaussian whose head output is zero.
pub const BASE_OPACITY_LOGIT: f64 = 2.0;
/// Raw values per Gaussian: offset 3, log-scale 3, quaternion 4, opacity 1, color 3.
pub const HEAD_OUTPUTS: usize = 14;

#[derive(Debug, Clone)]
pub struct UpLevel {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub to_map: Conv2d,
}

/// Expression-conditioned decoder from an avatar code to Gaussians.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub expr_mlp: Vec<Linear>,
    pub z2d: ParamId,
    pub z3d: ParamId,
    pub cross: Vec<AttentionBlock>,
    pub levels: Vec<UpLevel>,
    pub head_in: Linear,
    pub head_out: Linear,
}

impl Decoder {
    pub fn new<T: Float>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> std::result::Result<Self, TensorError> {
        let d = cfg.dim;
        let mut expr_mlp = Vec::new();
        let mut width = cfg.expr_dim;
        for i in 0..cfg.expr_layers {
            let out = if i + 1 == cfg.expr_layers { cfg.expr_tokens * d } else { cfg.expr_hidden };
            expr_mlp.push(Linear::new(store, &format!("decoder.expr.{i}"), width, out, rng));
            width = out;
        }
        let z2d = store.add("decoder.z2d".into(), normal_tensor(rng, &[1, d], 0.02));
        let z3d = store.add("decoder.z3d".into(), normal_tensor(rng, &[1, d], 0.02));
        let cross = (0..cfg.decoder_blocks)
            .map(|i| AttentionBlock::new(store, &format!("decoder.cross.{i}"), d, cfg.ffn_mult, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut levels = Vec::new();
        let mut c_in = d;
        for l in 0..cfg.up_levels {
            let name = format!("decoder.up.{l}");
            levels.push(UpLevel {
                conv_a: Conv2d::new(store, &format!("{name}.conv_a"), c_in, cfg.up_width, 3, rng),
                conv_b: Conv2d::new(store, &format!("{name}.conv_b"), cfg.up_width, cfg.up_width, 3, rng),
                to_map: Conv2d::new(store, &format!("{name}.to_map"), cfg.up_width, d >> (2 * (l + 1)), 1, rng),
            });
            c_in = cfg.up_width;
        }
        let head_in = Linear::new(store, "decoder.head.0", cfg.map_channels(), cfg.head_hidden, rng);
        let head_out = Linear::new(store, "decoder.head.1", cfg.head_hidden, HEAD_OUTPUTS, rng);
        Ok(Self { expr_mlp, z2d, z3d, cross, levels, head_in, head_out })
    }

    /// Expression sequence `[N_exp + 1, D]` with the selected bias token last.
    pub fn expression_tokens<T: Float>(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore<T>,
        z_exp: &[f64],
        mode: DecodeMode,
    ) -> Result<Tensor<T>> {
        if z_exp.len() != cfg.expr_dim {
            return Err(TensorError::Config {
                op: "expression_tokens",
                msg: format!("expression code has {} values, model expects {}", z_exp.len(), cfg.expr_dim),
            });
        }
        let mut x = Tensor::from_f64(z_exp, &[1, cfg.expr_dim])?;
        for (i, layer) in self.expr_mlp.iter().enumerate() {
            x = layer.forward(store, &x)?;
            if i + 1 < self.expr_mlp.len() {
                x = x.relu();
            }
        }
        let tokens = x.reshape(&[cfg.expr_tokens, cfg.dim])?;
        let sink = match mode {
            DecodeMode::Monocular => store.get(self.z2d),
            DecodeMode::MultiView | DecodeMode::Inference => store.get(self.z3d),
        };
        Tensor::concat(&[&tokens, sink], 0)
    }

    /// `h_dec [H_l, W_l, D]`: every code cell attends to the expression sequence.
    pub fn cross_decode<T: Float>(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore<T>,
        code: &Tensor<T>,
        s_exp: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut x = code.reshape(&[cfg.latent_len(), cfg.dim])?;
        for block in &self.cross {
            x = block.forward(store, &x, s_exp)?;
        }
        x.reshape(&[cfg.latent[0], cfg.latent[1], cfg.dim])
    }

    /// Two-stream upsampler. `h_dec [H_l, W_l, D]` to the attribute map
    /// `[D / 4^L, 2^L H_l, 2^L W_l]` (channel-first).
    pub fn upsample<T: Float>(&self, store: &ParamStore<T>, h_dec: &Tensor<T>) -> Result<Tensor<T>> {
        let start = h_dec.permute(&[2, 0, 1])?;
        let mut h_x = start.clone();
        let mut h_map = start;
        for level in &self.levels {
            let up = h_x.upsample_bilinear(2)?;
            h_x = level.conv_b.forward(store, &level.conv_a.forward(store, &up)?.leaky_relu(0.2))?;
            h_map = h_map.pixel_shuffle(2)?.add(&level.to_map.forward(store, &h_x)?)?;
        }
        Ok(h_map)
    }

    /// Attribute map sampled at the surface samples, through the head MLP.
    pub fn gaussian_head<T: Float>(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        samples: &SurfaceSamples,
    ) -> Result<GaussianSet<T>> {
        let g = samples.len();
        let h = self.head_in.forward(store, features)?.gelu();
        let raw = self.head_out.forward(store, &h)?;
        let col = |start: usize, len: usize| raw.narrow(1, start, len);
        let anchors = Tensor::from_f64(&samples.x_mesh.iter().flatten().copied().collect::<Vec<_>>(), &[g, 3])?;
        let position = anchors.add(&col(0, 3)?.tanh().mul_scalar(OFFSET_SCALE))?;
        let log_scale = col(3, 3)?.add_scalar(cfg.base_log_scale());
        let identity = Tensor::from_f64(&[1.0, 0.0, 0.0, 0.0], &[1, 4])?;
        let rotation = col(6, 4)?.add(&identity)?;
        let opacity = col(10, 1)?.reshape(&[g])?.add_scalar(BASE_OPACITY_LOGIT);
        let color = col(11, 3)?;
        GaussianSet::new(position, log_scale, rotation, opacity, color).map_err(|e| match e {
            crate::raster::RasterError::Tensor(t) => t,
            other => TensorError::Input { op: "gaussian_head", msg: other.to_string() },
        })
    }

    pub fn decode<T: Float>(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore<T>,
        samples: &SurfaceSamples,
        code: &Tensor<T>,
        z_exp: &[f64],
        mode: DecodeMode,
    ) -> Result<GaussianSet<T>> {
        let s_exp = self.expression_tokens(cfg, store, z_exp, mode)?;
        let h_dec = self.cross_decode(cfg, store, code, &s_exp)?;
        let mut map = self.upsample(store, &h_dec)?;
        if cfg.map_upsample_extra > 1 {
            map = map.upsample_nearest(cfg.map_upsample_extra)?;
        }
        let features = map.grid_sample(&samples.x_uv)?;
        self.gaussian_head(cfg, store, &features, samples)
    }
}

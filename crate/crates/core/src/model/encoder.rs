use rand::Rng;

use super::layers::{normal_tensor, AttentionBlock, Linear};
use super::params::{ParamId, ParamStore};
use super::ModelConfig;
use crate::geometry::{positional_encode, Camera, Vec3};
use crate::tensor::{Float, Result, Tensor, TensorError};

/// Image encoder: patch tokens with a shallow ViT, then UV-anchored queries
/// cross-attending to those tokens.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub vit: Vec<AttentionBlock>,
    pub fuse_in: Linear,
    pub fuse_out: Linear,
    pub query: Linear,
    pub cross: Vec<AttentionBlock>,
}

impl Encoder {
    pub fn new<T: Float>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> std::result::Result<Self, TensorError> {
        let d = cfg.dim;
        let patch_embed = Linear::new(store, "encoder.patch_embed", 9 * cfg.patch * cfg.patch, d, rng);
        let pos_embed = store.add("encoder.pos_embed".into(), normal_tensor(rng, &[cfg.tokens(), d], 0.02));
        let vit = (0..cfg.vit_blocks)
            .map(|i| AttentionBlock::new(store, &format!("encoder.vit.{i}"), d, cfg.ffn_mult, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let fuse_in = Linear::new(store, "encoder.fuse.0", d, d, rng);
        let fuse_out = Linear::new(store, "encoder.fuse.1", d, d, rng);
        let query = Linear::new(store, "encoder.query", 6 * cfg.pe_freqs, d, rng);
        let cross = (0..cfg.encoder_blocks)
            .map(|i| AttentionBlock::new(store, &format!("encoder.cross.{i}"), d, cfg.ffn_mult, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { patch_embed, pos_embed, vit, fuse_in, fuse_out, query, cross })
    }

    /// Concatenates image and ray channels, cuts non-overlapping patches and
    /// embeds them: `[N_tok, D]`.
    pub fn patch_tokens<T: Float>(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        plucker: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let p = cfg.patch;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h % p != 0 || w % p != 0 {
            return Err(TensorError::Config {
                op: "patchify",
                msg: format!("image {h}x{w} is not divisible by patch {p}"),
            });
        }
        let x = Tensor::concat(&[image, plucker], 0)?;
        let patches = x
            .reshape(&[9, h / p, p, w / p, p])?
            .permute(&[1, 3, 0, 2, 4])?
            .reshape(&[(h / p) * (w / p), 9 * p * p])?;
        self.patch_embed.forward(store, &patches)?.add(store.get(self.pos_embed))
    }

    /// Image features `f_img [N_tok, D]`.
    pub fn image_features<T: Float>(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        camera: &Camera,
    ) -> Result<Tensor<T>> {
        let s = cfg.image_size;
        if image.shape() != [3, s, s] || camera.width != s || camera.height != s {
            return Err(TensorError::Input {
                op: "encode",
                msg: format!(
                    "expected a 3x{s}x{s} image and camera, got {:?} and {}x{}",
                    image.shape(),
                    camera.width,
                    camera.height
                ),
            });
        }
        let plucker = camera.plucker_map::<T>();
        let mut x = self.patch_tokens(cfg, store, image, &plucker)?;
        for block in &self.vit {
            x = block.forward(store, &x, &x)?;
        }
        let h = self.fuse_in.forward(store, &x)?.gelu();
        self.fuse_out.forward(store, &h)
    }

    /// Queries `[H_l W_l, D]` from the encoded lattice points. They depend on
    /// the parameters only, never on the image.
    pub fn queries<T: Float>(&self, cfg: &ModelConfig, store: &ParamStore<T>, lattice: &[Vec3]) -> Result<Tensor<T>> {
        self.query.forward(store, &positional_encode::<T>(lattice, cfg.pe_freqs))
    }

    /// Avatar code `[H_l, W_l, D]`.
    pub fn encode<T: Float>(
        &self,
        cfg: &ModelConfig,
        store: &ParamStore<T>,
        lattice: &[Vec3],
        image: &Tensor<T>,
        camera: &Camera,
    ) -> Result<Tensor<T>> {
        let feats = self.image_features(cfg, store, image, camera)?;
        let mut q = self.queries(cfg, store, lattice)?;
        for block in &self.cross {
            q = block.forward(store, &q, &feats)?;
        }
        q.reshape(&[cfg.latent[0], cfg.latent[1], cfg.dim])
    }
}

//! The avatar network: image encoder, expression-conditioned decoder and the
//! Gaussian attribute head.

mod config;
mod decoder;
mod encoder;
pub mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ModelConfig, TemplateConfig};
pub use decoder::{Decoder, UpLevel, BASE_OPACITY_LOGIT, HEAD_OUTPUTS, OFFSET_SCALE};
pub use encoder::Encoder;
pub use params::{ParamId, ParamStore};

use crate::geometry::{sample_template, Camera, GeometryError, SurfaceSamples, TemplateSurface, TriMesh, Vec3};
use crate::raster::GaussianSet;
use crate::tensor::{Float, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Where a training sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Monocular,
    MultiView,
}

/// Selects the bias token appended to the expression sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecodeMode {
    Monocular,
    MultiView,
    /// Always the multi-view token.
    Inference,
}

impl From<Provenance> for DecodeMode {
    fn from(p: Provenance) -> Self {
        match p {
            Provenance::Monocular => DecodeMode::Monocular,
            Provenance::MultiView => DecodeMode::MultiView,
        }
    }
}

/// Texel-center texture coordinates of the latent grid, row-major.
pub fn lattice_uvs(latent: [usize; 2]) -> Vec<[f64; 2]> {
    let [h, w] = latent;
    (0..h)
        .flat_map(|i| (0..w).map(move |j| [(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64]))
        .collect()
}

pub fn load_template(cfg: &TemplateConfig) -> Result<TemplateSurface> {
    Ok(match cfg {
        TemplateConfig::Sphere => TemplateSurface::UnitSphere,
        TemplateConfig::Obj(path) => TemplateSurface::Mesh(TriMesh::load_obj(path.as_ref())?),
    })
}

/// Network layout plus the fixed template geometry it is anchored to.
/// Parameters live in a separate [`ParamStore`] so that the same layout can
/// run with trainable or frozen weights.
#[derive(Debug, Clone)]
pub struct AvatarNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Rendering samples, one Gaussian each.
    pub samples: SurfaceSamples,
    /// Template points behind the encoder queries, one per latent cell.
    pub lattice: Vec<Vec3>,
}

impl AvatarNet {
    /// Builds the layout and draws fresh weights and surface samples from `seed`.
    pub fn new<T: Float>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let surface = load_template(&config.template)?;
        let samples = sample_template(&surface, config.gaussians, seed ^ 0x5eed_5a3f)?;
        let lattice = lattice_uvs(config.latent).into_iter().map(|uv| surface.point_at(uv)).collect();
        Self::with_geometry(config, samples, lattice, seed)
    }

    /// Builds the layout around stored geometry. Weights are drawn from `seed`
    /// and are normally overwritten from a checkpoint afterwards.
    pub fn with_geometry<T: Float>(
        config: ModelConfig,
        samples: SurfaceSamples,
        lattice: Vec<Vec3>,
        seed: u64,
    ) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        if samples.len() != config.gaussians || lattice.len() != config.latent_len() {
            return Err(TensorError::Config {
                op: "model",
                msg: format!(
                    "geometry has {} samples and {} lattice points, config wants {} and {}",
                    samples.len(),
                    lattice.len(),
                    config.gaussians,
                    config.latent_len()
                ),
            }
            .into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&config, &mut store, &mut rng)?;
        let decoder = Decoder::new(&config, &mut store, &mut rng)?;
        Ok((Self { config, encoder, decoder, samples, lattice }, store))
    }

    /// Avatar code `[H_l, W_l, D]` of an image seen from `camera`.
    pub fn encode<T: Float>(&self, store: &ParamStore<T>, image: &Tensor<T>, camera: &Camera) -> Result<Tensor<T>> {
        Ok(self.encoder.encode(&self.config, store, &self.lattice, image, camera)?)
    }

    pub fn expression_tokens<T: Float>(&self, store: &ParamStore<T>, z_exp: &[f64], mode: DecodeMode) -> Result<Tensor<T>> {
        Ok(self.decoder.expression_tokens(&self.config, store, z_exp, mode)?)
    }

    pub fn decode<T: Float>(
        &self,
        store: &ParamStore<T>,
        code: &Tensor<T>,
        z_exp: &[f64],
        mode: DecodeMode,
    ) -> Result<GaussianSet<T>> {
        Ok(self.decoder.decode(&self.config, store, &self.samples, code, z_exp, mode)?)
    }
}

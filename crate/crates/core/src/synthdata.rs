//! Procedural Gaussian heads with controllable expressions, and the
//! monocular and multi-view datasets rendered from them.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dot, sample_template, sphere_point, Camera, GeometryError, Intrinsics, TemplateSurface};
use crate::imageio::{self, ImageError};
use crate::model::Provenance;
use crate::raster::{render_params, GaussianParams, RenderSettings};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("data config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Seed of the fixed point layout shared by all synthetic identities.
const LAYOUT_SEED: u64 = 0x1a70_u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center_uv: [f64; 2],
    /// Angular radius on the sphere, radians.
    pub radius: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthIdentity {
    pub seed: u64,
    pub palette: [[f64; 3]; 3],
    /// One region per expression coordinate.
    pub bumps: Vec<Bump>,
    pub frequencies: [f64; 2],
    pub phases: [f64; 2],
}

impl SynthIdentity {
    pub fn from_seed(seed: u64, expr_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x1d);
        let palette = [0; 3].map(|_| [0; 3].map(|_| rng.gen_range(0.08..0.92)));
        let bumps = (0..expr_dim)
            .map(|_| Bump {
                center_uv: [rng.gen_range(0.0..1.0), rng.gen_range(0.2..0.8)],
                radius: rng.gen_range(0.35..0.7),
                amplitude: rng.gen_range(0.06..0.15),
            })
            .collect();
        let frequencies = [rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0)];
        let phases = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
        Self { seed, palette, bumps, frequencies, phases }
    }

    /// Radial displacement at a unit-sphere point. Linear in `z`.
    pub fn displacement(&self, p: [f64; 3], z: &[f64]) -> f64 {
        self.bumps
            .iter()
            .zip(z)
            .map(|(b, zi)| {
                let c = sphere_point(b.center_uv);
                let angle = dot(p, c).clamp(-1.0, 1.0).acos();
                let r = angle / b.radius;
                let profile = if r < 1.0 { (1.0 - r * r).powi(2) } else { 0.0 };
                zi * b.amplitude * profile
            })
            .sum()
    }

    /// Surface color at a texture coordinate.
    pub fn color(&self, uv: [f64; 2]) -> [f64; 3] {
        let a = 0.5 + 0.5 * (2.0 * PI * self.frequencies[0] * uv[0] + self.phases[0]).sin();
        let b = 0.5 + 0.5 * (2.0 * PI * self.frequencies[1] * uv[1] + self.phases[1]).sin();
        let w = [a * (1.0 - b), b, (1.0 - a) * (1.0 - b)];
        let mut c = [0.0; 3];
        for (k, wk) in w.iter().enumerate() {
            for ch in 0..3 {
                c[ch] += wk * self.palette[k][ch];
            }
        }
        c
    }
}

/// Ground-truth Gaussians of an identity under expression `z`.
pub fn synth_gaussians(identity: &SynthIdentity, z: &[f64], count: usize) -> GaussianParams {
    let layout = sample_template(&TemplateSurface::UnitSphere, count, LAYOUT_SEED).expect("count is positive");
    let log_scale = (0.8 * (4.0 * PI / count as f64).sqrt()).ln();
    let mut out = GaussianParams::default();
    for (p, uv) in layout.x_mesh.iter().zip(&layout.x_uv) {
        let r = 1.0 + identity.displacement(*p, z);
        let c = identity.color(*uv).map(|v| {
            let v = v.clamp(0.02, 0.98);
            (v / (1.0 - v)).ln()
        });
        out.push([p[0] * r, p[1] * r, p[2] * r], [log_scale; 3], [1.0, 0.0, 0.0, 0.0], 5.0, c);
    }
    out
}

/// Viewpoint signal mixed into tracked codes: `(sin az, cos az, sin el)`
/// repeated over `dim` entries.
pub fn leak_direction(azimuth: f64, elevation: f64, dim: usize) -> Vec<f64> {
    let h = [azimuth.sin(), azimuth.cos(), elevation.sin()];
    (0..dim).map(|i| h[i % 3]).collect()
}

pub fn leaky_track(z_true: &[f64], azimuth: f64, elevation: f64, lambda: f64) -> Vec<f64> {
    if lambda == 0.0 {
        return z_true.to_vec();
    }
    z_true.iter().zip(leak_direction(azimuth, elevation, z_true.len())).map(|(z, h)| z + lambda * h).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    /// Focal length as a multiple of the image side.
    pub focal_ratio: f64,
    pub camera_distance: f64,
    pub expr_dim: usize,
    pub gt_gaussians: usize,
    pub mono_ids: usize,
    pub frames_per_id: usize,
    pub mv_ids: usize,
    pub mv_expressions: usize,
    pub mv_views: usize,
    pub heldout_ids: usize,
    pub heldout_views: usize,
    pub lambda: f64,
    pub azimuth_std_deg: f64,
    pub elevation_std_deg: f64,
    /// Expression coordinates are drawn uniformly from `[-z_range, z_range]`.
    pub z_range: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            focal_ratio: 1.1,
            camera_distance: 3.0,
            expr_dim: 8,
            gt_gaussians: 2000,
            mono_ids: 200,
            frames_per_id: 20,
            mv_ids: 8,
            mv_expressions: 10,
            mv_views: 8,
            heldout_ids: 16,
            heldout_views: 8,
            lambda: 0.3,
            azimuth_std_deg: 30.0,
            elevation_std_deg: 10.0,
            z_range: 1.0,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DataError::Config(m.into()));
        if self.image_size < 8 {
            return fail("image_size must be at least 8");
        }
        if self.mv_ids > 0 && self.mv_views < 2 {
            return fail("mv_views must be at least 2");
        }
        if self.heldout_ids > 0 && (self.heldout_views < 4 || self.heldout_views % 4 != 0) {
            return fail("heldout_views must be a positive multiple of 4");
        }
        if !(self.lambda >= 0.0) {
            return fail("lambda must be non-negative");
        }
        if self.expr_dim == 0 || self.gt_gaussians == 0 || self.frames_per_id == 0 {
            return fail("expr_dim, gt_gaussians and frames_per_id must be positive");
        }
        if !(self.focal_ratio > 0.0 && self.camera_distance > 1.5) {
            return fail("focal_ratio must be positive and camera_distance above 1.5");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::square(self.image_size, self.focal_ratio)
    }

    pub fn camera(&self, azimuth: f64, elevation: f64) -> Camera {
        Camera::orbit(azimuth, elevation, self.camera_distance, self.intrinsics()).expect("orbit cameras are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// Interleaved 8-bit RGB, exactly what is stored on disk.
    pub rgb: Vec<u8>,
    pub camera: Camera,
    pub azimuth: f64,
    pub elevation: f64,
    pub z_tracked: Vec<f64>,
    pub z_true: Vec<f64>,
    pub provenance: Provenance,
    pub identity_id: usize,
    /// Frame index within the identity; equal for all views of one expression.
    pub frame: usize,
    pub split: Split,
}

impl SynthSample {
    /// `[3, H, W]` float image.
    pub fn image(&self) -> Vec<f64> {
        imageio::from_rgb8(&self.rgb, self.camera.width, self.camera.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub id: usize,
    pub seed: u64,
    pub split: Split,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub config: DataConfig,
    pub identities: Vec<IdentityRecord>,
    /// Sorted by `(identity_id, frame, azimuth)`.
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    pub fn identity(&self, id: usize) -> Option<&IdentityRecord> {
        self.identities.iter().find(|r| r.id == id)
    }

    pub fn samples_of(&self, id: usize) -> impl Iterator<Item = &SynthSample> {
        self.samples.iter().filter(move |s| s.identity_id == id)
    }

    pub fn ids(&self, split: Split, provenance: Option<Provenance>) -> Vec<usize> {
        self.identities
            .iter()
            .filter(|r| r.split == split && provenance.map_or(true, |p| p == r.provenance))
            .map(|r| r.id)
            .collect()
    }
}

fn render_sample(
    identity: &SynthIdentity,
    cfg: &DataConfig,
    settings: &RenderSettings,
    z_true: &[f64],
    azimuth: f64,
    elevation: f64,
) -> (Vec<u8>, Camera) {
    let cam = cfg.camera(azimuth, elevation);
    let g = synth_gaussians(identity, z_true, cfg.gt_gaussians);
    let out = render_params(&g, &cam, settings);
    (imageio::to_rgb8(&out.image, cfg.image_size, cfg.image_size), cam)
}

fn draw_z(rng: &mut ChaCha8Rng, cfg: &DataConfig) -> Vec<f64> {
    (0..cfg.expr_dim).map(|_| rng.gen_range(-cfg.z_range..=cfg.z_range)).collect()
}

fn identity_seed(base: u64, id: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(id as u64 * 7919 + 1)
}

/// Front-biased camera angles `(azimuth, elevation)` in radians.
pub fn front_biased_angles(rng: &mut impl Rng, cfg: &DataConfig) -> (f64, f64) {
    let az = Normal::new(0.0, cfg.azimuth_std_deg.to_radians()).expect("finite std").sample(rng);
    let el = Normal::new(0.0, cfg.elevation_std_deg.to_radians()).expect("finite std").sample(rng);
    (az, el.clamp(-1.2, 1.2))
}

/// One camera per identity; every frame is a fresh expression tracked from
/// that same camera.
pub fn build_monocular(cfg: &DataConfig, settings: &RenderSettings, first_id: usize, n_ids: usize) -> Dataset {
    let mut ds = Dataset { config: cfg.clone(), ..Default::default() };
    for k in 0..n_ids {
        let id = first_id + k;
        let seed = identity_seed(cfg.seed, id);
        let identity = SynthIdentity::from_seed(seed, cfg.expr_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11ce);
        let (az, el) = front_biased_angles(&mut rng, cfg);
        ds.identities.push(IdentityRecord { id, seed, split: Split::Train, provenance: Provenance::Monocular });
        for frame in 0..cfg.frames_per_id {
            let z_true = draw_z(&mut rng, cfg);
            let (rgb, camera) = render_sample(&identity, cfg, settings, &z_true, az, el);
            ds.samples.push(SynthSample {
                rgb,
                camera,
                azimuth: az,
                elevation: el,
                z_tracked: leaky_track(&z_true, az, el, cfg.lambda),
                z_true,
                provenance: Provenance::Monocular,
                identity_id: id,
                frame,
                split: Split::Train,
            });
        }
    }
    ds
}

/// Per expression, one code tracked from the frontal camera drives renders
/// from `views` azimuths evenly covering the full circle.
#[allow(clippy::too_many_arguments)]
pub fn build_multiview(
    cfg: &DataConfig,
    settings: &RenderSettings,
    first_id: usize,
    n_ids: usize,
    expressions: usize,
    views: usize,
    split: Split,
) -> Dataset {
    let mut ds = Dataset { config: cfg.clone(), ..Default::default() };
    for k in 0..n_ids {
        let id = first_id + k;
        let seed = identity_seed(cfg.seed, id);
        let identity = SynthIdentity::from_seed(seed, cfg.expr_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b);
        ds.identities.push(IdentityRecord { id, seed, split, provenance: Provenance::MultiView });
        for frame in 0..expressions {
            let z_true = draw_z(&mut rng, cfg);
            let z_tracked = leaky_track(&z_true, 0.0, 0.0, cfg.lambda);
            for v in 0..views {
                let az = 2.0 * PI * v as f64 / views as f64;
                let (rgb, camera) = render_sample(&identity, cfg, settings, &z_true, az, 0.0);
                ds.samples.push(SynthSample {
                    rgb,
                    camera,
                    azimuth: az,
                    elevation: 0.0,
                    z_tracked: z_tracked.clone(),
                    z_true: z_true.clone(),
                    provenance: Provenance::MultiView,
                    identity_id: id,
                    frame,
                    split,
                });
            }
        }
    }
    ds
}

/// Monocular and multi-view training identities plus held-out identities,
/// each rendered at `heldout_views` evenly spaced azimuths for one expression.
pub fn build_all(cfg: &DataConfig, settings: &RenderSettings) -> Result<Dataset> {
    cfg.validate()?;
    let mono = build_monocular(cfg, settings, 0, cfg.mono_ids);
    let mv = build_multiview(cfg, settings, cfg.mono_ids, cfg.mv_ids, cfg.mv_expressions, cfg.mv_views, Split::Train);
    let held = build_multiview(
        cfg,
        settings,
        cfg.mono_ids + cfg.mv_ids,
        cfg.heldout_ids,
        1,
        cfg.heldout_views,
        Split::HeldOut,
    );
    let mut ds = Dataset { config: cfg.clone(), ..Default::default() };
    for part in [mono, mv, held] {
        ds.identities.extend(part.identities);
        ds.samples.extend(part.samples);
    }
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    image: String,
    /// `[R | t]` row-major: rotation (camera to world) with the camera center.
    camera: [f64; 12],
    intrinsics: [f64; 4],
    z_tracked: Vec<f64>,
    z_true: Vec<f64>,
    provenance: Provenance,
    identity_id: usize,
    frame: usize,
    split: Split,
    azimuth: f64,
    elevation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: DataConfig,
    identities: Vec<IdentityRecord>,
    samples: Vec<ManifestRecord>,
}

pub fn camera_record(cam: &Camera) -> ([f64; 12], [f64; 4]) {
    (cam.pose_row_major(), [cam.fx, cam.fy, cam.cx, cam.cy])
}

pub fn camera_from_record(pose: &[f64; 12], intr: &[f64; 4], width: usize, height: usize) -> Result<Camera> {
    let i = Intrinsics { fx: intr[0], fy: intr[1], cx: intr[2], cy: intr[3], width, height };
    Ok(Camera::from_pose_row_major(pose, i)?)
}

/// Writes `manifest.json` and one PNG per sample under `images/`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let io = |path: &Path| {
        let shown = path.display().to_string();
        move |source| DataError::Io { path: shown, source }
    };
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(io(&images))?;
    let mut records = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        imageio::save_png(&dir.join(&rel), &s.rgb, s.camera.width, s.camera.height)?;
        let (camera, intrinsics) = camera_record(&s.camera);
        records.push(ManifestRecord {
            image: rel,
            camera,
            intrinsics,
            z_tracked: s.z_tracked.clone(),
            z_true: s.z_true.clone(),
            provenance: s.provenance,
            identity_id: s.identity_id,
            frame: s.frame,
            split: s.split,
            azimuth: s.azimuth,
            elevation: s.elevation,
        });
    }
    let manifest = Manifest { config: ds.config.clone(), identities: ds.identities.clone(), samples: records };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    let path = dir.join("manifest.json");
    imageio::write_atomic(&path, text.as_bytes()).map_err(io(&path))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let mut samples = Vec::with_capacity(m.samples.len());
    for r in m.samples {
        let (rgb, w, h) = imageio::load_png(&dir.join(&r.image))?;
        samples.push(SynthSample {
            rgb,
            camera: camera_from_record(&r.camera, &r.intrinsics, w, h)?,
            azimuth: r.azimuth,
            elevation: r.elevation,
            z_tracked: r.z_tracked,
            z_true: r.z_true,
            provenance: r.provenance,
            identity_id: r.identity_id,
            frame: r.frame,
            split: r.split,
        });
    }
    Ok(Dataset { config: m.config, identities: m.identities, samples })
}

/// Number of distinct cameras used by each identity.
pub fn cameras_per_identity(ds: &Dataset) -> BTreeMap<usize, usize> {
    let mut out: BTreeMap<usize, Vec<[f64; 12]>> = BTreeMap::new();
    for s in &ds.samples {
        let pose = s.camera.pose_row_major();
        let list = out.entry(s.identity_id).or_default();
        if !list.contains(&pose) {
            list.push(pose);
        }
    }
    out.into_iter().map(|(k, v)| (k, v.len())).collect()
}

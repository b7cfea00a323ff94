//! Differentiable Gaussian splatting: EWA projection, tile binning,
//! depth-sorted alpha compositing and the matching analytic backward pass.
//!
//! All rasterizer arithmetic runs in `f64` regardless of the tensor type, and
//! runs single-threaded, so gradient reduction order is fixed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, Mat3, Vec3};
use crate::tensor::{Float, Tensor, TensorError};

pub const MIN_SCALE: f64 = 1e-4;
pub const MAX_SCALE: f64 = 1.0;
/// Mahalanobis radius (in standard deviations) of a splat's footprint.
pub const SIGMA_EXTENT: f64 = 3.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("render settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, RasterError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub tile: usize,
    pub alpha_cutoff: f64,
    pub transmittance_stop: f64,
    /// Low-pass variance added to every projected covariance, in pixels².
    pub dilation: f64,
    pub near: f64,
    pub alpha_max: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            tile: 16,
            alpha_cutoff: 1.0 / 255.0,
            transmittance_stop: 1e-4,
            dilation: 0.3,
            near: 0.01,
            alpha_max: 0.999,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RasterError::Settings(m.to_string()));
        if ![8, 16, 32].contains(&self.tile) {
            return bad("tile must be 8, 16 or 32");
        }
        if !(self.alpha_cutoff > 0.0 && self.alpha_cutoff < 1.0) {
            return bad("alpha_cutoff must lie in (0, 1)");
        }
        if !(self.transmittance_stop > 0.0 && self.transmittance_stop < 1.0) {
            return bad("transmittance_stop must lie in (0, 1)");
        }
        if !(self.dilation >= 0.0 && self.near > 0.0) {
            return bad("dilation must be non-negative and near positive");
        }
        if !(self.alpha_max > 0.0 && self.alpha_max < 1.0) {
            return bad("alpha_max must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Raw (pre-activation) Gaussian attributes as plain `f64` arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianParams {
    pub position: Vec<Vec3>,
    pub log_scale: Vec<Vec3>,
    /// `(w, x, y, z)`, renormalized before use.
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vec3>,
}

impl GaussianParams {
    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn push(&mut self, position: Vec3, log_scale: Vec3, rotation: [f64; 4], opacity_logit: f64, color: Vec3) {
        self.position.push(position);
        self.log_scale.push(log_scale);
        self.rotation.push(rotation);
        self.opacity_logit.push(opacity_logit);
        self.color.push(color);
    }

    /// The Gaussians listed in `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = Self::default();
        for &i in order {
            out.push(self.position[i], self.log_scale[i], self.rotation[i], self.opacity_logit[i], self.color[i]);
        }
        out
    }
}

/// Gaussian attributes as tensors on the autodiff graph.
#[derive(Debug, Clone)]
pub struct GaussianSet<T: Float = f32> {
    /// `[G, 3]`
    pub position: Tensor<T>,
    /// `[G, 3]`
    pub log_scale: Tensor<T>,
    /// `[G, 4]`
    pub rotation: Tensor<T>,
    /// `[G]`
    pub opacity_logit: Tensor<T>,
    /// `[G, 3]`
    pub color: Tensor<T>,
}

impl<T: Float> GaussianSet<T> {
    pub fn new(
        position: Tensor<T>,
        log_scale: Tensor<T>,
        rotation: Tensor<T>,
        opacity_logit: Tensor<T>,
        color: Tensor<T>,
    ) -> Result<Self> {
        let g = position.shape().first().copied().unwrap_or(0);
        let expect = [
            (&position, vec![g, 3]),
            (&log_scale, vec![g, 3]),
            (&rotation, vec![g, 4]),
            (&opacity_logit, vec![g]),
            (&color, vec![g, 3]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(TensorError::Shape { op: "gaussian_set", lhs: shape, rhs: t.shape().to_vec() }.into());
            }
        }
        Ok(Self { position, log_scale, rotation, opacity_logit, color })
    }

    pub fn from_params(p: &GaussianParams) -> Result<Self> {
        let g = p.len();
        let flat3 = |v: &[Vec3]| v.iter().flatten().copied().collect::<Vec<f64>>();
        Self::new(
            Tensor::from_f64(&flat3(&p.position), &[g, 3])?,
            Tensor::from_f64(&flat3(&p.log_scale), &[g, 3])?,
            Tensor::from_f64(&p.rotation.iter().flatten().copied().collect::<Vec<_>>(), &[g, 4])?,
            Tensor::from_f64(&p.opacity_logit, &[g])?,
            Tensor::from_f64(&flat3(&p.color), &[g, 3])?,
        )
    }

    pub fn len(&self) -> usize {
        self.position.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_params(&self) -> GaussianParams {
        let v3 = |t: &Tensor<T>| t.to_f64_vec().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        GaussianParams {
            position: v3(&self.position),
            log_scale: v3(&self.log_scale),
            rotation: self.rotation.to_f64_vec().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            opacity_logit: self.opacity_logit.to_f64_vec(),
            color: v3(&self.color),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Activated scale and its derivative with respect to the log-scale.
pub fn activate_scale(log_scale: f64) -> (f64, f64) {
    let s = log_scale.exp();
    if s < MIN_SCALE {
        (MIN_SCALE, 0.0)
    } else if s > MAX_SCALE {
        (MAX_SCALE, 0.0)
    } else {
        (s, s)
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_rot(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn normalize_quat(q: [f64; 4]) -> ([f64; 4], f64) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n < 1e-12 {
        return ([1.0, 0.0, 0.0, 0.0], 0.0);
    }
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn transpose3(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

/// World-space covariance `R S S^T R^T` of one Gaussian.
pub fn covariance3d(log_scale: Vec3, rotation: [f64; 4]) -> Mat3 {
    let r = quat_to_rot(normalize_quat(rotation).0);
    let s = log_scale.map(|l| activate_scale(l).0);
    let mut m = r;
    for row in m.iter_mut() {
        for k in 0..3 {
            row[k] *= s[k];
        }
    }
    matmul3(&m, &transpose3(&m))
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    /// Pixel coordinates of the projected mean; pixel `(i, j)` has its center at `(j + 0.5, i + 0.5)`.
    pub mean: [f64; 2],
    /// `(xx, xy, yy)` entries of the dilated screen covariance.
    pub cov: [f64; 3],
    /// `(xx, xy, yy)` entries of its inverse.
    pub conic: [f64; 3],
    pub depth: f64,
    pub index: usize,
    pub opacity: f64,
    pub color: Vec3,
}

#[derive(Debug, Clone, Default)]
pub struct Projection {
    /// Visible splats sorted by depth ascending, ties by Gaussian index.
    pub splats: Vec<Splat2D>,
    /// Gaussians dropped because their screen covariance was not invertible.
    pub degenerate: usize,
}

/// `(J W)` rows and camera-frame mean of a Gaussian.
struct Frame {
    t: Vec3,
    jw: [[f64; 3]; 2],
}

fn camera_frame(camera: &Camera, p: Vec3) -> Frame {
    let t = camera.world_to_camera(p);
    let [x, y, z] = t;
    let j = [
        [camera.fx / z, 0.0, -camera.fx * x / (z * z)],
        [0.0, camera.fy / z, -camera.fy * y / (z * z)],
    ];
    // W = R^T, so (J W)[r][c] = sum_k J[r][k] * R[c][k].
    let r = &camera.rotation;
    let mut jw = [[0.0; 3]; 2];
    for row in 0..2 {
        for c in 0..3 {
            jw[row][c] = (0..3).map(|k| j[row][k] * r[c][k]).sum();
        }
    }
    Frame { t, jw }
}

fn project_cov(jw: &[[f64; 3]; 2], sigma: &Mat3, dilation: f64) -> [f64; 3] {
    let mut m = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            m[r][c] = (0..3).map(|k| jw[r][k] * sigma[k][c]).sum();
        }
    }
    let e = |a: usize, b: usize| (0..3).map(|k| m[a][k] * jw[b][k]).sum::<f64>();
    [e(0, 0) + dilation, e(0, 1), e(1, 1) + dilation]
}

/// EWA projection of every Gaussian in front of the near plane.
pub fn ewa_project(params: &GaussianParams, camera: &Camera, settings: &RenderSettings) -> Projection {
    let mut out = Projection::default();
    for i in 0..params.len() {
        let f = camera_frame(camera, params.position[i]);
        let [x, y, z] = f.t;
        if !(z > settings.near) {
            continue;
        }
        let sigma = covariance3d(params.log_scale[i], params.rotation[i]);
        let cov = project_cov(&f.jw, &sigma, settings.dilation);
        let det = cov[0] * cov[2] - cov[1] * cov[1];
        if !(det > 0.0) || !det.is_finite() {
            out.degenerate += 1;
            continue;
        }
        let c = params.color[i];
        out.splats.push(Splat2D {
            mean: [camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy],
            cov,
            conic: [cov[2] / det, -cov[1] / det, cov[0] / det],
            depth: z,
            index: i,
            opacity: sigmoid(params.opacity_logit[i]),
            color: [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])],
        });
    }
    out.splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    out
}

/// Evaluated splat at one pixel center.
#[derive(Debug, Clone, Copy)]
struct Hit {
    alpha: f64,
    /// `exp(power)` before scaling by opacity.
    falloff: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

#[inline]
fn evaluate(s: &Splat2D, px: f64, py: f64, settings: &RenderSettings, cutoff: bool) -> Option<Hit> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let [a, b, c] = s.conic;
    let maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if cutoff && maha > SIGMA_EXTENT * SIGMA_EXTENT {
        return None;
    }
    let falloff = (-0.5 * maha).exp();
    let raw = s.opacity * falloff;
    let clamped = raw > settings.alpha_max;
    let alpha = if clamped { settings.alpha_max } else { raw };
    if alpha < settings.alpha_cutoff {
        return None;
    }
    Some(Hit { alpha, falloff, dx, dy, clamped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterOutput {
    pub width: usize,
    pub height: usize,
    /// `[3, H, W]`
    pub image: Vec<f64>,
    /// `[H, W]` residual transmittance after compositing.
    pub transmittance: Vec<f64>,
    pub degenerate: usize,
}

/// Per-tile lists of splat positions (indices into `splats`), each in splat order.
fn bin_tiles(splats: &[Splat2D], width: usize, height: usize, tile: usize) -> (usize, Vec<Vec<u32>>) {
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        // Tight bounding box of the 3-sigma ellipse, padded against rounding.
        let rx = SIGMA_EXTENT * s.cov[0].sqrt() * (1.0 + 1e-9) + 1e-9;
        let ry = SIGMA_EXTENT * s.cov[2].sqrt() * (1.0 + 1e-9) + 1e-9;
        let j0 = (s.mean[0] - rx - 0.5).ceil();
        let j1 = (s.mean[0] + rx - 0.5).floor();
        let i0 = (s.mean[1] - ry - 0.5).ceil();
        let i1 = (s.mean[1] + ry - 0.5).floor();
        if j1 < 0.0 || i1 < 0.0 || j0 > (width - 1) as f64 || i0 > (height - 1) as f64 || j0 > j1 || i0 > i1 {
            continue;
        }
        let (j0, j1) = (j0.max(0.0) as usize, (j1 as usize).min(width - 1));
        let (i0, i1) = (i0.max(0.0) as usize, (i1 as usize).min(height - 1));
        for ty in i0 / tile..=i1 / tile {
            for tx in j0 / tile..=j1 / tile {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    (tiles_x, bins)
}

fn composite_pixel<'a>(
    order: impl Iterator<Item = &'a Splat2D>,
    px: f64,
    py: f64,
    settings: &RenderSettings,
    cutoff: bool,
) -> (Vec3, f64) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for s in order {
        let Some(h) = evaluate(s, px, py, settings, cutoff) else { continue };
        for k in 0..3 {
            c[k] += t * h.alpha * s.color[k];
        }
        t *= 1.0 - h.alpha;
        if t < settings.transmittance_stop {
            break;
        }
    }
    for k in 0..3 {
        c[k] += t * settings.background[k];
    }
    (c, t)
}

/// Tile-based compositing of projected splats into a `width x height` image.
pub fn rasterize(proj: &Projection, settings: &RenderSettings, width: usize, height: usize) -> RasterOutput {
    let (tiles_x, bins) = bin_tiles(&proj.splats, width, height, settings.tile);
    let hw = width * height;
    let mut image = vec![0.0; 3 * hw];
    let mut transmittance = vec![0.0; hw];
    for i in 0..height {
        for j in 0..width {
            let bin = &bins[(i / settings.tile) * tiles_x + j / settings.tile];
            let order = bin.iter().map(|&k| &proj.splats[k as usize]);
            let (c, t) = composite_pixel(order, j as f64 + 0.5, i as f64 + 0.5, settings, true);
            for k in 0..3 {
                image[k * hw + i * width + j] = c[k];
            }
            transmittance[i * width + j] = t;
        }
    }
    RasterOutput { width, height, image, transmittance, degenerate: proj.degenerate }
}

/// Brute-force renderer: every pixel visits every projected Gaussian in global
/// depth order. With `cutoff` the 3-sigma footprint test is applied per pixel,
/// matching the tiled path; without it only the alpha threshold prunes.
pub fn rasterize_reference(
    params: &GaussianParams,
    camera: &Camera,
    settings: &RenderSettings,
    cutoff: bool,
) -> RasterOutput {
    let proj = ewa_project(params, camera, settings);
    let (width, height) = (camera.width, camera.height);
    let hw = width * height;
    let mut image = vec![0.0; 3 * hw];
    let mut transmittance = vec![0.0; hw];
    for i in 0..height {
        for j in 0..width {
            let (c, t) = composite_pixel(proj.splats.iter(), j as f64 + 0.5, i as f64 + 0.5, settings, cutoff);
            for k in 0..3 {
                image[k * hw + i * width + j] = c[k];
            }
            transmittance[i * width + j] = t;
        }
    }
    RasterOutput { width, height, image, transmittance, degenerate: proj.degenerate }
}

/// Forward render of raw parameters without building a graph.
pub fn render_params(params: &GaussianParams, camera: &Camera, settings: &RenderSettings) -> RasterOutput {
    let proj = ewa_project(params, camera, settings);
    rasterize(&proj, settings, camera.width, camera.height)
}

/// Gradients with respect to the activated screen-space quantities of one splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: Vec3,
}

/// Backward of the compositing stage: `g_image` is `[3, H, W]`.
fn rasterize_backward(
    proj: &Projection,
    settings: &RenderSettings,
    width: usize,
    height: usize,
    g_image: &[f64],
) -> Vec<SplatGrad> {
    let (tiles_x, bins) = bin_tiles(&proj.splats, width, height, settings.tile);
    let hw = width * height;
    let mut grads = vec![SplatGrad::default(); proj.splats.len()];
    let mut hits: Vec<(u32, Hit, f64)> = Vec::new();
    for i in 0..height {
        for j in 0..width {
            let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
            let g = [g_image[i * width + j], g_image[hw + i * width + j], g_image[2 * hw + i * width + j]];
            if g == [0.0; 3] {
                continue;
            }
            hits.clear();
            let mut t = 1.0;
            for &k in &bins[(i / settings.tile) * tiles_x + j / settings.tile] {
                let Some(h) = evaluate(&proj.splats[k as usize], px, py, settings, true) else { continue };
                hits.push((k, h, t));
                t *= 1.0 - h.alpha;
                if t < settings.transmittance_stop {
                    break;
                }
            }
            // Back to front: `rest` is the color seen behind the current splat.
            let mut rest = settings.background;
            for &(k, h, t_before) in hits.iter().rev() {
                let s = &proj.splats[k as usize];
                let sg = &mut grads[k as usize];
                let mut g_alpha = 0.0;
                for c in 0..3 {
                    sg.color[c] += g[c] * t_before * h.alpha;
                    g_alpha += g[c] * t_before * (s.color[c] - rest[c]);
                    rest[c] = h.alpha * s.color[c] + (1.0 - h.alpha) * rest[c];
                }
                if h.clamped {
                    continue;
                }
                sg.opacity += g_alpha * h.falloff;
                // alpha = opacity * exp(power), power = -0.5 * d^T Q d.
                let g_power = g_alpha * h.alpha;
                let [a, b, c] = s.conic;
                sg.mean[0] += g_power * (a * h.dx + b * h.dy);
                sg.mean[1] += g_power * (b * h.dx + c * h.dy);
                sg.conic[0] += g_power * -0.5 * h.dx * h.dx;
                sg.conic[1] += g_power * -h.dx * h.dy;
                sg.conic[2] += g_power * -0.5 * h.dy * h.dy;
            }
        }
    }
    grads
}

/// Raw-parameter gradients of one Gaussian.
#[derive(Debug, Clone, Copy, Default)]
struct ParamGrad {
    position: Vec3,
    log_scale: Vec3,
    rotation: [f64; 4],
    opacity_logit: f64,
    color: Vec3,
}

/// Derivatives of the rotation matrix with respect to `(w, x, y, z)`.
fn quat_rot_jacobian(q: [f64; 4]) -> [Mat3; 4] {
    let [w, x, y, z] = q;
    let t = |m: [[f64; 3]; 3]| m.map(|r| r.map(|v| 2.0 * v));
    [
        t([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]]),
        t([[0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]]),
        t([[-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]]),
        t([[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]]),
    ]
}

fn backprop_gaussian(params: &GaussianParams, s: &Splat2D, sg: &SplatGrad, camera: &Camera) -> ParamGrad {
    let i = s.index;
    let mut out = ParamGrad::default();

    let c = params.color[i];
    for k in 0..3 {
        let a = sigmoid(c[k]);
        out.color[k] = sg.color[k] * a * (1.0 - a);
    }
    out.opacity_logit = sg.opacity * s.opacity * (1.0 - s.opacity);

    // Conic -> screen covariance: dL/dCov = -Q G Q with G the symmetric
    // gradient of Q (off-diagonal entries carry half of the xy gradient).
    let q = [[s.conic[0], s.conic[1]], [s.conic[1], s.conic[2]]];
    let gq = [[sg.conic[0], 0.5 * sg.conic[1]], [0.5 * sg.conic[1], sg.conic[2]]];
    let mut gcov = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = 0.0;
            for p in 0..2 {
                for r in 0..2 {
                    acc -= q[a][p] * gq[p][r] * q[r][b];
                }
            }
            gcov[a][b] = acc;
        }
    }

    let f = camera_frame(camera, params.position[i]);
    let [x, y, z] = f.t;
    let (rq, qn) = normalize_quat(params.rotation[i]);
    let rot = quat_to_rot(rq);
    let sc: Vec<(f64, f64)> = params.log_scale[i].iter().map(|&l| activate_scale(l)).collect();
    let mut m = rot;
    for row in m.iter_mut() {
        for k in 0..3 {
            row[k] *= sc[k].0;
        }
    }
    let sigma = matmul3(&m, &transpose3(&m));

    // cov = JW Sigma (JW)^T: dSigma = (JW)^T G (JW), d(JW) = 2 G (JW) Sigma.
    let jw = f.jw;
    let mut gsigma = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = 0.0;
            for p in 0..2 {
                for r in 0..2 {
                    acc += jw[p][a] * gcov[p][r] * jw[r][b];
                }
            }
            gsigma[a][b] = acc;
        }
    }
    let mut gjw = [[0.0; 3]; 2];
    for p in 0..2 {
        for c in 0..3 {
            let mut acc = 0.0;
            for r in 0..2 {
                for k in 0..3 {
                    acc += gcov[p][r] * jw[r][k] * sigma[k][c];
                }
            }
            gjw[p][c] = 2.0 * acc;
        }
    }
    // JW = J R^T, so dJ = d(JW) R.
    let rcam = &camera.rotation;
    let mut gj = [[0.0; 3]; 2];
    for p in 0..2 {
        for k in 0..3 {
            gj[p][k] = (0..3).map(|c| gjw[p][c] * rcam[c][k]).sum();
        }
    }
    let (fx, fy) = (camera.fx, camera.fy);
    let (z2, z3) = (z * z, z * z * z);
    let mut gt = [0.0; 3];
    gt[0] += gj[0][2] * (-fx / z2);
    gt[1] += gj[1][2] * (-fy / z2);
    gt[2] += gj[0][0] * (-fx / z2) + gj[0][2] * (2.0 * fx * x / z3) + gj[1][1] * (-fy / z2) + gj[1][2] * (2.0 * fy * y / z3);
    // Projected mean.
    gt[0] += sg.mean[0] * fx / z;
    gt[1] += sg.mean[1] * fy / z;
    gt[2] += sg.mean[0] * (-fx * x / z2) + sg.mean[1] * (-fy * y / z2);
    // t = R^T (p - o) so dp = R dt.
    out.position = crate::geometry::mat_vec(rcam, gt);

    // Sigma = M M^T, M = R S.
    let mut gm = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            gm[a][b] = 2.0 * (0..3).map(|k| gsigma[a][k] * m[k][b]).sum::<f64>();
        }
    }
    let mut grot = [[0.0; 3]; 3];
    for a in 0..3 {
        for k in 0..3 {
            grot[a][k] = gm[a][k] * sc[k].0;
        }
    }
    for k in 0..3 {
        let gs: f64 = (0..3).map(|a| gm[a][k] * rot[a][k]).sum();
        out.log_scale[k] = gs * sc[k].1;
    }
    if qn > 0.0 {
        let dr = quat_rot_jacobian(rq);
        let mut gqhat = [0.0; 4];
        for (n, d) in dr.iter().enumerate() {
            gqhat[n] = (0..3).flat_map(|a| (0..3).map(move |b| (a, b))).map(|(a, b)| grot[a][b] * d[a][b]).sum();
        }
        let proj: f64 = (0..4).map(|n| gqhat[n] * rq[n]).sum();
        for n in 0..4 {
            out.rotation[n] = (gqhat[n] - rq[n] * proj) / qn;
        }
    }
    out
}

/// Differentiable render `[3, H, W]` of a Gaussian set seen from `camera`.
pub fn render<T: Float>(set: &GaussianSet<T>, camera: &Camera, settings: &RenderSettings) -> Result<Tensor<T>> {
    settings.validate()?;
    let params = set.to_params();
    let proj = ewa_project(&params, camera, settings);
    let (w, h) = (camera.width, camera.height);
    let fwd = rasterize(&proj, settings, w, h);
    let data: Vec<T> = fwd.image.iter().map(|&v| T::of(v)).collect();
    let camera = *camera;
    let settings = *settings;
    let g = params.len();
    let inputs = [&set.position, &set.log_scale, &set.rotation, &set.opacity_logit, &set.color];
    Ok(Tensor::from_op(data, vec![3, h, w], &inputs, move |_, grad, needs| {
        let g_image: Vec<f64> = grad.iter().map(|v| v.f64()).collect();
        let sgrads = rasterize_backward(&proj, &settings, w, h, &g_image);
        let mut pos = vec![T::zero(); g * 3];
        let mut ls = vec![T::zero(); g * 3];
        let mut rot = vec![T::zero(); g * 4];
        let mut op = vec![T::zero(); g];
        let mut col = vec![T::zero(); g * 3];
        for (s, sg) in proj.splats.iter().zip(&sgrads) {
            let pg = backprop_gaussian(&params, s, sg, &camera);
            let i = s.index;
            for k in 0..3 {
                pos[i * 3 + k] = T::of(pg.position[k]);
                ls[i * 3 + k] = T::of(pg.log_scale[k]);
                col[i * 3 + k] = T::of(pg.color[k]);
            }
            for k in 0..4 {
                rot[i * 4 + k] = T::of(pg.rotation[k]);
            }
            op[i] = T::of(pg.opacity_logit);
        }
        let pick = |n: usize, v: Vec<T>| needs[n].then_some(v);
        vec![pick(0, pos), pick(1, ls), pick(2, rot), pick(3, op), pick(4, col)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;

    fn cam() -> Camera {
        Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], Intrinsics::square(32, 1.0)).unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let s = RenderSettings { background: [0.2, 0.4, 0.6], ..Default::default() };
        let out = render_params(&GaussianParams::default(), &cam(), &s);
        assert!(out.transmittance.iter().all(|&t| t == 1.0));
        assert!(out.image[..1024].iter().all(|&v| v == 0.2));
        assert!(out.image[2048..].iter().all(|&v| v == 0.6));
    }

    #[test]
    fn single_splat_on_pixel_center() {
        let c = cam();
        // Pixel (16, 16) has its center at (16.5, 16.5); back-project it to depth 3.
        let d = c.ray_direction(16.5, 16.5);
        let t = 3.0 / d[2];
        let p = [c.translation[0] + t * d[0], c.translation[1] + t * d[1], c.translation[2] + t * d[2]];
        let mut g = GaussianParams::default();
        let logit = 0.4;
        g.push(p, [-3.0; 3], [1.0, 0.0, 0.0, 0.0], logit, [0.3, -0.2, 1.0]);
        let s = RenderSettings { background: [0.1, 0.5, 0.9], ..Default::default() };
        let out = render_params(&g, &c, &s);
        let a = sigmoid(logit);
        let idx = 16 * 32 + 16;
        for k in 0..3 {
            let col = sigmoid(g.color[0][k]);
            let expect = a * col + (1.0 - a) * s.background[k];
            assert!((out.image[k * 1024 + idx] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn isotropic_on_axis_covariance() {
        let c = cam();
        let s = RenderSettings::default();
        let mut g = GaussianParams::default();
        let sc: f64 = 0.05;
        g.push([0.0, 0.0, 1.0], [sc.ln(); 3], [1.0, 0.0, 0.0, 0.0], 0.0, [0.0; 3]);
        let p = ewa_project(&g, &c, &s);
        let z = 4.0;
        let e = (c.fx * sc / z).powi(2) + s.dilation;
        let sp = p.splats[0];
        assert!((sp.cov[0] - e).abs() < 1e-12 && sp.cov[1].abs() < 1e-12 && (sp.cov[2] - e).abs() < 1e-12);
        assert_eq!(sp.depth, 4.0);
    }

    #[test]
    fn behind_near_is_culled() {
        let mut g = GaussianParams::default();
        g.push([0.0, 0.0, -3.5], [-2.0; 3], [1.0, 0.0, 0.0, 0.0], 0.0, [0.0; 3]);
        assert!(ewa_project(&g, &cam(), &RenderSettings::default()).splats.is_empty());
    }

    #[test]
    fn quaternion_jacobian_matches_differences() {
        let q = [0.6, -0.3, 0.5, 0.2];
        let d = quat_rot_jacobian(q);
        for n in 0..4 {
            let (mut a, mut b) = (q, q);
            a[n] += 1e-6;
            b[n] -= 1e-6;
            let (ra, rb) = (quat_to_rot(a), quat_to_rot(b));
            for i in 0..3 {
                for j in 0..3 {
                    assert!(((ra[i][j] - rb[i][j]) / 2e-6 - d[n][i][j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn settings_validation() {
        assert!(RenderSettings::default().validate().is_ok());
        assert!(RenderSettings { tile: 12, ..Default::default() }.validate().is_err());
        assert!(RenderSettings { alpha_cutoff: 0.0, ..Default::default() }.validate().is_err());
    }
}

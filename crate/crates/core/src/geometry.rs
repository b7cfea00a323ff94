//! Cameras, ray embeddings, the template surface and positional encoding.
//!
//! Conventions: world is right-handed; the camera frame has +x right, +y down
//! and +z forward, so pixel `(u, v)` grows right and down. `rotation` maps
//! camera-frame vectors to world (columns are the camera axes in world
//! coordinates) and `translation` is the camera center.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Float, Tensor};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("point at depth {depth} is not in front of the camera (near = {near})")]
    BehindCamera { depth: f64, near: f64 },
    #[error("obj line {line}: {msg}")]
    Obj { line: usize, msg: String },
    #[error("template: {0}")]
    Template(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// `m * v`.
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// `m^T * v`.
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Pinhole intrinsics and image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square image with the principal point at the image center and focal
    /// length `focal_ratio * size` pixels.
    pub fn square(size: usize, focal_ratio: f64) -> Self {
        let f = focal_ratio * size as f64;
        let c = size as f64 / 2.0;
        Self { fx: f, fy: f, cx: c, cy: c, width: size, height: size }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    pub fn new(intr: Intrinsics, rotation: Mat3, translation: Vec3) -> Result<Self> {
        let cam = Self {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::Camera(format!("focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        if self.width < 8 || self.height < 8 {
            return Err(GeometryError::Camera(format!("image {}x{} smaller than 8x8", self.width, self.height)));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr - expect).abs() > 1e-6 {
                    return Err(GeometryError::Camera("rotation is not orthonormal".into()));
                }
            }
        }
        if determinant(r) < 0.0 {
            return Err(GeometryError::Camera("rotation has determinant -1".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy, width: self.width, height: self.height }
    }

    /// Camera looking from `eye` at `target`, with `up` as the approximate world up.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intr: Intrinsics) -> Result<Self> {
        let view = sub(target, eye);
        if norm(view) < 1e-12 {
            return Err(GeometryError::Camera("eye coincides with target".into()));
        }
        let forward = normalize(view);
        let side = cross(forward, up);
        if norm(side) < 1e-9 * norm(up).max(1e-300) {
            return Err(GeometryError::Camera("up vector is parallel to the viewing direction".into()));
        }
        let right = normalize(side);
        let down = cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::new(intr, rotation, eye)
    }

    /// Camera on a sphere of radius `distance` around the origin. Azimuth 0
    /// looks at the front of the head from `-z`; positive azimuth moves the eye
    /// toward `+x`, positive elevation toward `+y`.
    pub fn orbit(azimuth: f64, elevation: f64, distance: f64, intr: Intrinsics) -> Result<Self> {
        let eye = [
            distance * azimuth.sin() * elevation.cos(),
            distance * elevation.sin(),
            -distance * azimuth.cos() * elevation.cos(),
        ];
        Self::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], intr)
    }

    /// Camera-frame axis `k` expressed in world coordinates.
    pub fn axis(&self, k: usize) -> Vec3 {
        [self.rotation[0][k], self.rotation[1][k], self.rotation[2][k]]
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, sub(p, self.translation))
    }

    /// Pixel coordinates and depth of a world point.
    pub fn project(&self, p: Vec3, near: f64) -> Result<(f64, f64, f64)> {
        let [x, y, z] = self.world_to_camera(p);
        if z <= near {
            return Err(GeometryError::BehindCamera { depth: z, near });
        }
        Ok((self.fx * x / z + self.cx, self.fy * y / z + self.cy, z))
    }

    /// Unit world-space direction of the ray through pixel coordinate `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        normalize(mat_vec(&self.rotation, d))
    }

    /// Per pixel center, the unit ray direction `d` then the moment `o x d`,
    /// as a `[6, H, W]` tensor.
    pub fn plucker_map<T: Float>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![T::zero(); 6 * h * w];
        for i in 0..h {
            for j in 0..w {
                let d = self.ray_direction(j as f64 + 0.5, i as f64 + 0.5);
                let m = cross(self.translation, d);
                for c in 0..3 {
                    data[c * h * w + i * w + j] = T::of(d[c]);
                    data[(3 + c) * h * w + i * w + j] = T::of(m[c]);
                }
            }
        }
        Tensor::from_vec(data, &[6, h, w]).expect("positive image size")
    }

    /// The 12 values of `[R | t]` in row-major order.
    pub fn pose_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2],
        ]
    }

    pub fn from_pose_row_major(pose: &[f64; 12], intr: Intrinsics) -> Result<Self> {
        let rotation = [
            [pose[0], pose[1], pose[2]],
            [pose[4], pose[5], pose[6]],
            [pose[8], pose[9], pose[10]],
        ];
        Self::new(intr, rotation, [pose[3], pose[7], pose[11]])
    }
}

pub fn determinant(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Indexed triangle mesh with per-corner texture coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub positions: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
    /// Per triangle: `(position index, uv index)` for each corner.
    pub triangles: Vec<[(usize, usize); 3]>,
}

impl TriMesh {
    /// Parses the `v`, `vt` and `f` records of a Wavefront OBJ document.
    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut mesh = TriMesh { positions: Vec::new(), uvs: Vec::new(), triangles: Vec::new() };
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let err = |msg: String| GeometryError::Obj { line, msg };
            let mut it = raw.split_whitespace();
            match it.next() {
                Some("v") => {
                    let v = parse_floats(it, 3).map_err(err)?;
                    mesh.positions.push([v[0], v[1], v[2]]);
                }
                Some("vt") => {
                    let v = parse_floats(it, 2).map_err(err)?;
                    if !v.iter().all(|x| (0.0..=1.0).contains(x)) {
                        return Err(err(format!("texture coordinate {v:?} outside [0, 1]")));
                    }
                    mesh.uvs.push([v[0], v[1]]);
                }
                Some("f") => {
                    let corners: Vec<&str> = it.collect();
                    if corners.len() != 3 {
                        return Err(err(format!("only triangles are supported, got {} vertices", corners.len())));
                    }
                    let mut tri = [(0, 0); 3];
                    for (k, c) in corners.iter().enumerate() {
                        let mut parts = c.split('/');
                        let vi = resolve_index(parts.next(), mesh.positions.len()).map_err(&err)?;
                        let ti = resolve_index(parts.next(), mesh.uvs.len())
                            .map_err(|m| err(format!("texture index: {m}")))?;
                        tri[k] = (vi, ti);
                    }
                    mesh.triangles.push(tri);
                }
                _ => {}
            }
        }
        if mesh.triangles.is_empty() {
            return Err(GeometryError::Obj { line: 0, msg: "no faces".into() });
        }
        Ok(mesh)
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        Self::parse_obj(&std::fs::read_to_string(path)?)
    }
}

fn parse_floats<'a>(it: impl Iterator<Item = &'a str>, n: usize) -> std::result::Result<Vec<f64>, String> {
    let v: Vec<f64> = it
        .take(n)
        .map(|s| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} numbers"));
    }
    Ok(v)
}

fn resolve_index(tok: Option<&str>, count: usize) -> std::result::Result<usize, String> {
    let tok = tok.filter(|s| !s.is_empty()).ok_or_else(|| "missing index".to_string())?;
    let i: i64 = tok.parse().map_err(|e| format!("{tok:?}: {e}"))?;
    let idx = if i > 0 { i - 1 } else { count as i64 + i };
    if i == 0 || idx < 0 || idx as usize >= count {
        return Err(format!("index {i} out of range (have {count})"));
    }
    Ok(idx as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TemplateSurface {
    /// Unit sphere with `u` as longitude (`u = 0.5` faces `-z`) and `v` as
    /// polar angle from `+y`.
    UnitSphere,
    Mesh(TriMesh),
}

impl TemplateSurface {
    /// Surface point at a texture coordinate. Mesh charts may leave parts of
    /// the texture square uncovered; those fall back to the vertex whose
    /// texture coordinate is nearest.
    pub fn point_at(&self, uv: [f64; 2]) -> Vec3 {
        match self {
            TemplateSurface::UnitSphere => sphere_point(uv),
            TemplateSurface::Mesh(mesh) => mesh_point_at_uv(mesh, uv).map(|(p, _)| p).unwrap_or_else(|| {
                let mut best = (f64::INFINITY, [0.0; 3]);
                for tri in &mesh.triangles {
                    for &(v, t) in tri {
                        let q = mesh.uvs[t];
                        let d = (q[0] - uv[0]).powi(2) + (q[1] - uv[1]).powi(2);
                        if d < best.0 {
                            best = (d, mesh.positions[v]);
                        }
                    }
                }
                best.1
            }),
        }
    }
}

/// Point of the unit sphere at texture coordinate `uv`.
pub fn sphere_point(uv: [f64; 2]) -> Vec3 {
    let theta = 2.0 * std::f64::consts::PI * (uv[0] - 0.5);
    let phi = std::f64::consts::PI * uv[1];
    [phi.sin() * theta.sin(), phi.cos(), -phi.sin() * theta.cos()]
}

/// Texture coordinate of a point on (or direction toward) the unit sphere.
pub fn sphere_uv(p: Vec3) -> [f64; 2] {
    let d = normalize(p);
    let phi = d[1].clamp(-1.0, 1.0).acos();
    let theta = d[0].atan2(-d[2]);
    [theta / (2.0 * std::f64::consts::PI) + 0.5, phi / std::f64::consts::PI]
}

/// Points sampled on the template together with their texture coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSamples {
    pub x_mesh: Vec<Vec3>,
    pub x_uv: Vec<[f64; 2]>,
    /// Outward unit surface normal at each sample.
    pub normals: Vec<Vec3>,
}

impl SurfaceSamples {
    pub fn len(&self) -> usize {
        self.x_mesh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_mesh.is_empty()
    }
}

/// Stratified jittered sampling of `g` points over the texture square.
///
/// Rows split `v` evenly; each row splits `u` evenly among its share of the
/// samples, and every sample is jittered uniformly inside its cell.
pub fn stratified_uv(g: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let rows = ((g as f64).sqrt().round() as usize).clamp(1, g.max(1));
    let mut out = Vec::with_capacity(g);
    for r in 0..rows {
        let count = g * (r + 1) / rows - g * r / rows;
        for c in 0..count {
            let u = (c as f64 + rng.gen::<f64>()) / count as f64;
            let v = (r as f64 + rng.gen::<f64>()) / rows as f64;
            out.push([u, v]);
        }
    }
    out
}

pub fn sample_template(surface: &TemplateSurface, g: usize, seed: u64) -> Result<SurfaceSamples> {
    if g == 0 {
        return Err(GeometryError::Template("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uvs = stratified_uv(g, &mut rng);
    let mut s = SurfaceSamples { x_mesh: Vec::with_capacity(g), x_uv: Vec::with_capacity(g), normals: Vec::with_capacity(g) };
    match surface {
        TemplateSurface::UnitSphere => {
            for uv in uvs {
                let p = sphere_point(uv);
                s.x_mesh.push(p);
                s.normals.push(p);
                s.x_uv.push(uv);
            }
        }
        TemplateSurface::Mesh(mesh) => {
            for mut uv in uvs {
                let mut tries = 0;
                loop {
                    if let Some((p, n)) = mesh_point_at_uv(mesh, uv) {
                        s.x_mesh.push(p);
                        s.normals.push(n);
                        s.x_uv.push(uv);
                        break;
                    }
                    tries += 1;
                    if tries > 10_000 {
                        return Err(GeometryError::Template("mesh UV chart covers almost nothing".into()));
                    }
                    uv = [rng.gen(), rng.gen()];
                }
            }
        }
    }
    Ok(s)
}

fn mesh_point_at_uv(mesh: &TriMesh, uv: [f64; 2]) -> Option<(Vec3, Vec3)> {
    for tri in &mesh.triangles {
        let [a, b, c] = tri.map(|(_, t)| mesh.uvs[t]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        if det.abs() < 1e-14 {
            continue;
        }
        let l1 = ((uv[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (uv[1] - a[1])) / det;
        let l2 = ((b[0] - a[0]) * (uv[1] - a[1]) - (uv[0] - a[0]) * (b[1] - a[1])) / det;
        let l0 = 1.0 - l1 - l2;
        let tol = -1e-12;
        if l0 >= tol && l1 >= tol && l2 >= tol {
            let [pa, pb, pc] = tri.map(|(v, _)| mesh.positions[v]);
            let p = add(add(scale(pa, l0), scale(pb, l1)), scale(pc, l2));
            let n = cross(sub(pb, pa), sub(pc, pa));
            if norm(n) < 1e-14 {
                continue;
            }
            return Some((p, normalize(n)));
        }
    }
    None
}

/// Sinusoidal features `[G, 6F]`: for each `k < F`, `sin(2^k pi x)` for the
/// three coordinates followed by `cos(2^k pi x)` for the three coordinates.
pub fn positional_encode<T: Float>(x: &[Vec3], freqs: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(x.len() * 6 * freqs);
    for p in x {
        for k in 0..freqs {
            let w = (1u64 << k) as f64 * std::f64::consts::PI;
            for c in p {
                data.push(T::of((w * c).sin()));
            }
            for c in p {
                data.push(T::of((w * c).cos()));
            }
        }
    }
    Tensor::from_vec(data, &[x.len(), 6 * freqs]).expect("non-empty encoding input")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics::square(32, 1.0)
    }

    #[test]
    fn look_at_axis_aligned() {
        let c = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], intr()).unwrap();
        assert_eq!(c.axis(2), [0.0, 0.0, 1.0]);
        assert!((c.axis(1)[1] + 1.0).abs() < 1e-15, "y axis points down");
        let c = Camera::look_at([4.0, 0.0, 0.0], [0.0; 3], [0.0, 1.0, 0.0], intr()).unwrap();
        assert_eq!(c.axis(2), [-1.0, 0.0, 0.0]);
        assert!((determinant(&c.rotation) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn look_at_rejects_degenerate_up() {
        assert!(Camera::look_at([0.0, 3.0, 0.0], [0.0; 3], [0.0, 1.0, 0.0], intr()).is_err());
        assert!(Camera::look_at([0.0; 3], [0.0; 3], [0.0, 1.0, 0.0], intr()).is_err());
    }

    #[test]
    fn project_center_and_depth_scaling() {
        let c = Camera::look_at([0.0, 0.0, -1.0], [0.0; 3], [0.0, 1.0, 0.0], intr()).unwrap();
        let (u, v, z) = c.project([0.0, 0.0, 0.0], 0.01).unwrap();
        assert_eq!((u, v, z), (c.cx, c.cy, 1.0));
        let (u1, _, _) = c.project([0.2, 0.0, 0.0], 0.01).unwrap();
        let (u2, _, _) = c.project([0.2, 0.0, 1.0], 0.01).unwrap();
        assert!(((u1 - c.cx) - 2.0 * (u2 - c.cx)).abs() < 1e-12);
        assert!(c.project([0.0, 0.0, -2.0], 0.01).is_err());
    }

    #[test]
    fn plucker_at_origin_has_zero_moment() {
        let c = Camera::new(intr(), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3]).unwrap();
        let m = c.plucker_map::<f64>();
        assert!(m.data()[3 * 32 * 32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sphere_uv_round_trip_and_front() {
        let p = sphere_point([0.5, 0.5]);
        assert!((p[2] + 1.0).abs() < 1e-15 && p[0].abs() < 1e-15 && p[1].abs() < 1e-15);
        for uv in [[0.1, 0.3], [0.7, 0.9], [0.5, 0.2]] {
            let back = sphere_uv(sphere_point(uv));
            assert!((back[0] - uv[0]).abs() < 1e-12 && (back[1] - uv[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn obj_rejects_quads_and_reads_triangles() {
        let quad = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nf 1/1 2/2 3/3 4/4\n";
        assert!(matches!(TriMesh::parse_obj(quad), Err(GeometryError::Obj { line: 9, .. })));
        let tri = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1/1 2/2/1 -1/-1/1\n";
        let m = TriMesh::parse_obj(tri).unwrap();
        assert_eq!(m.triangles, vec![[(0, 0), (1, 1), (2, 2)]]);
    }

    #[test]
    fn mesh_sampling_lands_on_triangles() {
        let tri = "v 0 0 0\nv 2 0 0\nv 0 2 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n";
        let mesh = TriMesh::parse_obj(tri).unwrap();
        let s = sample_template(&TemplateSurface::Mesh(mesh), 100, 1).unwrap();
        assert_eq!(s.len(), 100);
        for (p, uv) in s.x_mesh.iter().zip(&s.x_uv) {
            assert!(uv[0] + uv[1] <= 1.0 + 1e-9);
            assert!((p[0] - 2.0 * uv[0]).abs() < 1e-9 && (p[1] - 2.0 * uv[1]).abs() < 1e-9 && p[2] == 0.0);
        }
    }
}

//! Seeded Gaussian scenes for renderer verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Camera, Intrinsics};
use crate::raster::GaussianParams;

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 0.05 && n2 <= 1.0 {
            return q;
        }
    }
}

/// Frontal camera three units from the origin.
pub fn scene_camera(size: usize, focal_ratio: f64) -> Camera {
    Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], Intrinsics::square(size, focal_ratio))
        .expect("valid frontal camera")
}

/// `g` Gaussians of mixed size, shape and opacity spread through the view
/// frustum of [`scene_camera`]; some straddle the image border.
pub fn random_scene(seed: u64, g: usize) -> GaussianParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = GaussianParams::default();
    for _ in 0..g {
        let pos = [rng.gen_range(-1.3..1.3), rng.gen_range(-1.3..1.3), rng.gen_range(-1.0..1.0)];
        let ls = [0; 3].map(|_| rng.gen_range(0.02f64..0.3).ln());
        let col = [0; 3].map(|_| rng.gen_range(-3.0..3.0));
        p.push(pos, ls, random_quat(&mut rng), rng.gen_range(-3.0..4.0), col);
    }
    p
}

/// A few large, semi-transparent Gaussians at well separated depths whose
/// 3-sigma footprints cover a small image entirely, so that no per-pixel
/// threshold switches under small perturbations. Render with
/// `scene_camera(12, 2.0)`.
pub fn smooth_scene(seed: u64, g: usize) -> GaussianParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = GaussianParams::default();
    for k in 0..g {
        let z = -0.6 + 1.2 * (k as f64 + rng.gen_range(0.2..0.8)) / g as f64;
        let pos = [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), z];
        let ls = [0; 3].map(|_| rng.gen_range(0.5f64..0.9).ln());
        let col = [0; 3].map(|_| rng.gen_range(-2.0..2.0));
        p.push(pos, ls, random_quat(&mut rng), rng.gen_range(-0.5..0.8), col);
    }
    p
}

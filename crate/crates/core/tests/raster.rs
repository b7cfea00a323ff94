use avatar_core::geometry::{Camera, Intrinsics};
use avatar_core::raster::{
    covariance3d, ewa_project, rasterize, rasterize_reference, render, render_params, GaussianParams,
    GaussianSet, RenderSettings,
};
use avatar_core::scenes::{random_scene, scene_camera, smooth_scene};
use avatar_core::tensor::gradcheck::grad_check;
use avatar_core::tensor::Tensor;
use proptest::prelude::*;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn tiled_matches_reference_with_cutoff() {
    let cam = scene_camera(32, 1.0);
    let s = RenderSettings { background: [0.1, 0.2, 0.3], ..Default::default() };
    for seed in 0..50 {
        let g = random_scene(seed, 1 + (seed as usize * 37) % 128);
        let tiled = render_params(&g, &cam, &s);
        let reference = rasterize_reference(&g, &cam, &s, true);
        assert!(max_diff(&tiled.image, &reference.image) <= 1e-5, "seed {seed}");
    }
}

#[test]
fn reference_without_cutoff_differs_by_excluded_tails_only() {
    // Each splat dropped by the 3-sigma test at a pixel would have had alpha at
    // most alpha_max * e^-4.5 there, and inserting a layer of opacity a moves a
    // composite by at most a. With n such tails the gap is bounded by
    // 1 - (1 - a0)^n, plus what early termination can hide (T < stop).
    let cam = scene_camera(32, 1.0);
    let s = RenderSettings::default();
    let a0 = s.alpha_max * (-4.5f64).exp();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let g = random_scene(seed, 1 + (seed as usize * 37) % 128);
        let tiled = render_params(&g, &cam, &s);
        let reference = rasterize_reference(&g, &cam, &s, false);
        let splats = ewa_project(&g, &cam, &s).splats;
        for i in 0..32 {
            for j in 0..32 {
                let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                let tails = splats
                    .iter()
                    .filter(|sp| {
                        let (dx, dy) = (px - sp.mean[0], py - sp.mean[1]);
                        let m = sp.conic[0] * dx * dx + 2.0 * sp.conic[1] * dx * dy + sp.conic[2] * dy * dy;
                        m > 9.0 && sp.opacity * (-0.5 * m).exp() >= s.alpha_cutoff
                    })
                    .count();
                let bound = 1.0 - (1.0 - a0).powi(tails as i32) + s.transmittance_stop + 1e-12;
                for k in 0..3 {
                    let idx = k * 1024 + i * 32 + j;
                    let d = (tiled.image[idx] - reference.image[idx]).abs();
                    worst = worst.max(d);
                    assert!(d <= bound, "seed {seed} pixel ({i},{j}): {d} > {bound}");
                }
            }
        }
    }
    assert!(worst > 0.0);
}

#[test]
fn ranges_of_outputs() {
    let cam = scene_camera(32, 1.0);
    let s = RenderSettings { background: [1.0, 0.5, 0.0], ..Default::default() };
    for seed in 100..110 {
        let out = render_params(&random_scene(seed, 96), &cam, &s);
        assert!(out.transmittance.iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn permutation_invariance() {
    let cam = scene_camera(32, 1.0);
    let s = RenderSettings::default();
    for seed in 0..10 {
        let g = random_scene(seed, 64);
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.reverse();
        order.rotate_left(seed as usize % 7);
        let a = render_params(&g, &cam, &s);
        let b = render_params(&g.permuted(&order), &cam, &s);
        assert_eq!(a.image, b.image);

        let ta = render(&GaussianSet::<f32>::from_params(&g).unwrap(), &cam, &s).unwrap();
        let tb = render(&GaussianSet::<f32>::from_params(&g.permuted(&order)).unwrap(), &cam, &s).unwrap();
        let d = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(d <= 1e-6);
    }
}

#[test]
fn transparent_scene_is_background_with_zero_color_gradient() {
    let cam = scene_camera(16, 1.0);
    let mut g = random_scene(3, 10);
    g.opacity_logit.iter_mut().for_each(|o| *o = -1e4);
    let s = RenderSettings { background: [0.3, 0.6, 0.9], ..Default::default() };
    let set = GaussianSet::<f64>::from_params(&g).unwrap();
    let set = GaussianSet { color: set.color.clone().requires_grad(), ..set };
    let img = render(&set, &cam, &s).unwrap();
    for k in 0..3 {
        assert!(img.data()[k * 256..(k + 1) * 256].iter().all(|&v| v == s.background[k]));
    }
    img.sum().backward().unwrap();
    let gc = set.color.grad().unwrap_or_default();
    assert!(gc.iter().all(|&v| v == 0.0));
}

fn screen_cov_oracle(cam: &Camera, p: [f64; 3], sigma: [[f64; 3]; 3], dilation: f64) -> [f64; 3] {
    // Full 3x3 matrices: W = R^T, J padded with a zero third row.
    let r = cam.rotation;
    let w: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| r[j][i]).collect()).collect();
    let t: Vec<f64> = (0..3).map(|i| (0..3).map(|k| w[i][k] * (p[k] - cam.translation[k])).sum()).collect();
    let j = [
        [cam.fx / t[2], 0.0, -cam.fx * t[0] / (t[2] * t[2])],
        [0.0, cam.fy / t[2], -cam.fy * t[1] / (t[2] * t[2])],
        [0.0, 0.0, 0.0],
    ];
    let mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..3).map(|i| (0..3).map(|c| (0..3).map(|k| a[i][k] * b[k][c]).sum()).collect()).collect()
    };
    let tr = |a: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { (0..3).map(|i| (0..3).map(|c| a[c][i]).collect()).collect() };
    let jm: Vec<Vec<f64>> = j.iter().map(|r| r.to_vec()).collect();
    let sm: Vec<Vec<f64>> = sigma.iter().map(|r| r.to_vec()).collect();
    let t2 = mul(&jm, &w);
    let c = mul(&mul(&t2, &sm), &tr(&t2));
    [c[0][0] + dilation, c[0][1], c[1][1] + dilation]
}

proptest! {
    #[test]
    fn projected_covariance_matches_matrix_oracle(
        seed in 0u64..1000,
        az in -1.5f64..1.5,
        el in -0.6f64..0.6,
    ) {
        let cam = Camera::orbit(az, el, 3.0, Intrinsics::square(32, 1.1)).unwrap();
        let g = random_scene(seed, 1);
        let s = RenderSettings::default();
        let proj = ewa_project(&g, &cam, &s);
        let sigma = covariance3d(g.log_scale[0], g.rotation[0]);
        let expect = screen_cov_oracle(&cam, g.position[0], sigma, s.dilation);
        prop_assert_eq!(proj.splats.len(), 1);
        for k in 0..3 {
            prop_assert!((proj.splats[0].cov[k] - expect[k]).abs() <= 1e-9 * (1.0 + expect[k].abs()));
        }
    }
}

#[test]
fn rasterize_matches_render_forward() {
    let cam = scene_camera(32, 1.0);
    let s = RenderSettings::default();
    let g = random_scene(5, 40);
    let proj = ewa_project(&g, &cam, &s);
    let a = rasterize(&proj, &s, 32, 32);
    let b = render(&GaussianSet::<f64>::from_params(&g).unwrap(), &cam, &s).unwrap();
    assert_eq!(a.image, b.to_vec());
}

fn weights(n: usize, seed: u64) -> Tensor<f64> {
    let v: Vec<f64> = (0..n).map(|i| (((i as u64 + 1) * (seed + 7) * 2654435761) % 1000) as f64 / 1000.0 - 0.3).collect();
    Tensor::from_f64(&v, &[3, 12, 12]).unwrap()
}

#[test]
fn attribute_gradients_match_finite_differences() {
    let cam = scene_camera(12, 2.0);
    let s = RenderSettings { background: [0.2, 0.1, 0.4], ..Default::default() };
    for seed in 0..10 {
        let g = smooth_scene(seed, 5);
        let set = GaussianSet::<f64>::from_params(&g).unwrap();
        let w = weights(3 * 144, seed);
        let inputs = [set.position, set.log_scale, set.rotation, set.opacity_logit, set.color];
        let report = grad_check(
            |t| {
                let set = GaussianSet::new(t[0].clone(), t[1].clone(), t[2].clone(), t[3].clone(), t[4].clone())
                    .unwrap();
                render(&set, &cam, &s).unwrap().mul(&w).unwrap().sum().pipe(Ok)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-3, "seed {seed}: {report:?}");
    }
}

trait Pipe: Sized {
    fn pipe<R>(self, f: impl FnOnce(Self) -> R) -> R {
        f(self)
    }
}
impl<T> Pipe for T {}

#[test]
fn single_color_gradient_of_mean_intensity() {
    let cam = scene_camera(12, 2.0);
    let s = RenderSettings::default();
    let g = smooth_scene(42, 3);
    let set = GaussianSet::<f64>::from_params(&g).unwrap();
    let report = grad_check(
        |t| {
            let set = GaussianSet { color: t[0].clone(), ..set.clone() };
            Ok(render(&set, &cam, &s).unwrap().mean())
        },
        &[set.color.clone()],
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-3, "{report:?}");
}

#[test]
fn empty_params_render() {
    let out = render_params(&GaussianParams::default(), &scene_camera(8, 1.0), &RenderSettings::default());
    assert_eq!(out.image.len(), 3 * 64);
}

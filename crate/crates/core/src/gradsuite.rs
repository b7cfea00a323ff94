//! Finite-difference audit of every differentiable operation, loss, the
//! rasterizer and the assembled model, run in `f64` over several seeds.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Camera, Intrinsics};
use crate::model::layers::multihead_attention;
use crate::model::{AvatarNet, DecodeMode, ModelConfig, ModelError, ParamStore};
use crate::objectives::{feature_loss, l1_loss, rec_loss, ssim, LossWeights, RandomPyramid};
use crate::raster::{render, GaussianSet, RasterError, RenderSettings};
use crate::scenes::{scene_camera, smooth_scene};
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, SuiteError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Core,
    Loss,
    Raster,
    Model,
}

impl Group {
    /// Largest accepted relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Group::Core => 1e-4,
            _ => 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub group: Group,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub skipped: usize,
    pub resolved: usize,
    /// `(analytic, numeric)` at the largest error.
    pub worst_values: (f64, f64),
    /// Seed at which the largest error occurred.
    pub worst_seed: u64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.group.tolerance() && self.skipped as f64 <= MAX_SKIPPED * (self.checked + self.skipped) as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {:<26} max rel err {:.2e} (tol {:.0e}, {} seeds, {} coords, {} resolved, {} non-smooth)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.group.tolerance(),
            self.seeds,
            self.checked,
            self.resolved,
            self.skipped
        )
    }

    /// Where the largest error occurred.
    pub fn detail(&self) -> String {
        format!("seed {}: analytic {:e}, numeric {:e}", self.worst_seed, self.worst_values.0, self.worst_values.1)
    }
}

type CaseFn = fn(u64) -> Result<GradCheckReport>;

#[derive(Clone)]
pub struct Case {
    pub name: &'static str,
    pub group: Group,
    pub run: CaseFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).expect("shape")
}

/// Values with magnitude in `[0.2, 2)` and random sign, away from kinks.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.gen_range(0.2..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::from_vec(v, shape).expect("shape")
}

/// Like [`project`] with positive weights, so the result cannot cancel to
/// near zero and its magnitude sets the rounding scale.
fn project_positive(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdcba);
    let w = uniform(&mut rng, y.shape(), 0.5, 1.5);
    Ok(y.mul(&w)?.mean())
}

/// Contracts an output with fixed random weights so that every output entry
/// receives a distinct upstream gradient.
fn project(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = uniform(&mut rng, y.shape(), -1.0, 1.0);
    Ok(y.mul(&w)?.sum())
}

const EPS: f64 = 1e-4;

fn unary(seed: u64, positive: bool, f: fn(&Tensor<f64>) -> Result<Tensor<f64>>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = if positive { uniform(&mut rng, &[3, 5], 0.3, 2.5) } else { off_zero(&mut rng, &[3, 5]) };
    Ok(grad_check(|v| Ok(project(&f(&v[0]).map_err(to_tensor)?, seed).map_err(to_tensor)?), &[x], EPS)?)
}

fn binary(seed: u64, a: &[usize], b: &[usize], f: fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = off_zero(&mut rng, a);
    let y = off_zero(&mut rng, b);
    Ok(grad_check(|v| project(&f(&v[0], &v[1]).map_err(to_tensor)?, seed).map_err(to_tensor), &[x, y], EPS)?)
}

fn to_tensor(e: SuiteError) -> TensorError {
    match e {
        SuiteError::Tensor(t) => t,
        other => TensorError::Input { op: "gradsuite", msg: other.to_string() },
    }
}

fn shaped(seed: u64, shape: &[usize], f: impl Fn(&Tensor<f64>) -> std::result::Result<Tensor<f64>, TensorError>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, shape, -1.5, 1.5);
    Ok(grad_check(|v| project(&f(&v[0])?, seed).map_err(to_tensor), &[x], EPS)?)
}

pub fn core_cases() -> Vec<Case> {
    use Group::Core;
    macro_rules! case {
        ($name:expr, $f:expr) => {
            Case { name: $name, group: Core, run: $f }
        };
    }
    vec![
        case!("add (broadcast)", |s| binary(s, &[2, 3, 4], &[3, 1], |a, b| Ok(a.add(b)?))),
        case!("sub (broadcast)", |s| binary(s, &[4], &[3, 4], |a, b| Ok(a.sub(b)?))),
        case!("mul (broadcast)", |s| binary(s, &[2, 3], &[2, 1], |a, b| Ok(a.mul(b)?))),
        case!("div (broadcast)", |s| binary(s, &[3, 4], &[4], |a, b| Ok(a.div(b)?))),
        case!("neg", |s| unary(s, false, |x| Ok(x.neg()))),
        case!("exp", |s| unary(s, false, |x| Ok(x.exp()))),
        case!("ln", |s| unary(s, true, |x| Ok(x.ln()))),
        case!("tanh", |s| unary(s, false, |x| Ok(x.tanh()))),
        case!("sigmoid", |s| unary(s, false, |x| Ok(x.sigmoid()))),
        case!("relu", |s| unary(s, false, |x| Ok(x.relu()))),
        case!("leaky_relu", |s| unary(s, false, |x| Ok(x.leaky_relu(0.2)))),
        case!("gelu", |s| unary(s, false, |x| Ok(x.gelu()))),
        case!("sqrt", |s| unary(s, true, |x| Ok(x.sqrt()))),
        case!("abs", |s| unary(s, false, |x| Ok(x.abs()))),
        case!("square", |s| unary(s, false, |x| Ok(x.square()))),
        case!("scalar affine", |s| unary(s, false, |x| Ok(x.mul_scalar(-1.7).add_scalar(0.3)))),
        case!("sum", |s| unary(s, false, |x| Ok(x.sum().mul_scalar(1.3)))),
        case!("mean", |s| unary(s, false, |x| Ok(x.mean().square()))),
        case!("sum_axis", |s| shaped(s, &[2, 3, 4], |x| x.sum_axis(1))),
        case!("reshape", |s| shaped(s, &[2, 6], |x| x.reshape(&[3, 4]))),
        case!("permute", |s| shaped(s, &[2, 3, 4], |x| x.permute(&[2, 0, 1]))),
        case!("transpose", |s| shaped(s, &[3, 5], |x| x.transpose(0, 1))),
        case!("concat", |s| binary(s, &[2, 3], &[2, 2], |a, b| Ok(Tensor::concat(&[a, b, a], 1)?))),
        case!("narrow", |s| shaped(s, &[4, 5], |x| x.narrow(1, 1, 3))),
        case!("softmax", |s| shaped(s, &[3, 5], |x| x.softmax(1))),
        case!("layer_norm", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[3, 6], -2.0, 2.0);
            let g = uniform(&mut rng, &[6], 0.5, 1.5);
            let b = uniform(&mut rng, &[6], -0.5, 0.5);
            Ok(grad_check(|v| project(&v[0].layer_norm(&v[1], &v[2], 1e-5)?, s).map_err(to_tensor), &[x, g, b], EPS)?)
        }),
        case!("matmul (batched)", |s| binary(s, &[2, 3, 4], &[4, 5], |a, b| Ok(a.matmul(b)?))),
        case!("conv2d", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[2, 6, 6], -1.0, 1.0);
            let k = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[3], -1.0, 1.0);
            Ok(grad_check(|v| project(&v[0].conv2d(&v[1], Some(&v[2]), 1, 1)?, s).map_err(to_tensor), &[x, k, b], EPS)?)
        }),
        case!("conv2d (stride 2)", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = uniform(&mut rng, &[2, 8, 8], -1.0, 1.0);
            let k = uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
            Ok(grad_check(|v| project(&v[0].conv2d(&v[1], None, 2, 1)?, s).map_err(to_tensor), &[x, k], EPS)?)
        }),
        case!("pixel_shuffle", |s| shaped(s, &[8, 2, 3], |x| x.pixel_shuffle(2))),
        case!("pixel_unshuffle", |s| shaped(s, &[2, 4, 6], |x| x.pixel_unshuffle(2))),
        case!("upsample_bilinear", |s| shaped(s, &[2, 3, 4], |x| x.upsample_bilinear(2))),
        case!("upsample_nearest", |s| shaped(s, &[2, 3, 3], |x| x.upsample_nearest(3))),
        case!("grid_sample", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x99);
            let coords: Vec<[f64; 2]> = (0..12).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
            shaped(s, &[3, 5, 4], move |x| x.grid_sample(&coords))
        }),
        case!("blur_valid", |s| shaped(s, &[2, 7, 8], |x| x.blur_valid(&[0.25, 0.5, 0.25]))),
        case!("attention", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let q = uniform(&mut rng, &[3, 8], -1.0, 1.0);
            let k = uniform(&mut rng, &[5, 8], -1.0, 1.0);
            let v = uniform(&mut rng, &[5, 8], -1.0, 1.0);
            Ok(grad_check(|t| project(&multihead_attention(&t[0], &t[1], &t[2], 2)?, s).map_err(to_tensor), &[q, k, v], EPS)?)
        }),
    ]
}

fn image_pair(seed: u64, size: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = uniform(&mut rng, &[3, size, size], 0.0, 1.0);
    // keep every pixel at least 0.05 from its target so L1 stays smooth
    let pred: Vec<f64> = target
        .data()
        .iter()
        .map(|&t| {
            let d = rng.gen_range(0.05..0.4);
            if t > 0.5 { t - d } else { t + d }
        })
        .collect();
    (Tensor::from_vec(pred, &[3, size, size]).unwrap(), target)
}

const LOSS_EPS: f64 = 1e-4;

/// Checks every entry of `x` for functions with leaky-ReLU kinks, leaving out
/// entries whose eps-neighbourhood straddles one.
fn check_kinked(x: Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>, seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let id = store.add("x".into(), x);
    sampled_param_check(&mut store, &|p| f(p.get(id)), usize::MAX, 1e-7, seed)
}

pub fn loss_cases() -> Vec<Case> {
    use Group::Loss;
    vec![
        Case {
            name: "l1",
            group: Loss,
            run: |s| {
                let (p, t) = image_pair(s, 8);
                Ok(grad_check(|v| l1_loss(&v[0], &t), &[p], LOSS_EPS)?)
            },
        },
        Case {
            name: "ssim",
            group: Loss,
            run: |s| {
                let (p, t) = image_pair(s, 16);
                Ok(grad_check(|v| ssim(&v[0], &t), &[p], LOSS_EPS)?)
            },
        },
        Case {
            name: "feature",
            group: Loss,
            run: |s| {
                let (p, t) = image_pair(s, 16);
                let fx = RandomPyramid::<f64>::new(s);
                check_kinked(p, &|x| Ok(feature_loss(x, &t, &fx)?), s)
            },
        },
        Case {
            name: "reconstruction",
            group: Loss,
            run: |s| {
                let (p, t) = image_pair(s, 16);
                let fx = RandomPyramid::<f64>::new(s + 1);
                let w = LossWeights::default();
                check_kinked(p, &|x| Ok(rec_loss(x, &t, &w, &fx, 1.0)?.total), s)
            },
        },
    ]
}

pub fn raster_cases() -> Vec<Case> {
    vec![Case {
        name: "render attributes",
        group: Group::Raster,
        run: |s| {
            let cam = scene_camera(12, 2.0);
            let settings = RenderSettings { background: [0.2, 0.1, 0.4], ..Default::default() };
            let set = GaussianSet::<f64>::from_params(&smooth_scene(s, 5))?;
            let inputs = [set.position, set.log_scale, set.rotation, set.opacity_logit, set.color];
            Ok(grad_check(
                |t| {
                    let set = GaussianSet::new(t[0].clone(), t[1].clone(), t[2].clone(), t[3].clone(), t[4].clone())
                        .map_err(|e| TensorError::Input { op: "render", msg: e.to_string() })?;
                    let img = render(&set, &cam, &settings).map_err(|e| TensorError::Input { op: "render", msg: e.to_string() })?;
                    project(&img, s).map_err(to_tensor)
                },
                &inputs,
                EPS,
            )?)
        },
    }]
}

const NOISE_ULPS: f64 = 128.0;
const KINK_RATIO: f64 = 0.01;
/// Largest accepted fraction of entries left out as non-smooth.
pub const MAX_SKIPPED: f64 = 0.02;

/// Checks `per_tensor` entries of the model parameters, chosen at random, against
/// central differences of `f`.
pub fn sampled_param_check(
    store: &mut ParamStore<f64>,
    f: &dyn Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    store.zero_grad();
    let loss = f(store)?;
    let base = loss.item();
    loss.backward()?;
    drop(loss);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    store.zero_grad();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, worst_values: (0.0, 0.0), checked: 0, skipped: 0, resolved: 0 };
    for (i, grads) in analytic.iter().enumerate() {
        let mut picks: Vec<usize> = (0..grads.len()).collect();
        picks.shuffle(&mut rng);
        picks.truncate(per_tensor);
        let id = crate::model::ParamId(i);
        for j in picks {
            let orig = store.get(id).data()[j];
            let mut probe = |x: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[j] = x;
                Ok(f(&store.frozen())?.item())
            };
            let (hi, lo) = (probe(orig + eps)?, probe(orig - eps)?);
            let (hi2, lo2) = (probe(orig + eps / 2.0)?, probe(orig - eps / 2.0)?);
            store.get_mut(id).data_mut()[j] = orig;
            let wide = (hi - lo) / (2.0 * eps);
            let numeric = (hi2 - lo2) / eps;
            // Rounding noise of the narrower quotient; smaller differences
            // (e.g. around exactly zero gradients) cannot be resolved.
            let scale = [hi, lo, hi2, lo2, base].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let noise = NOISE_ULPS * f64::EPSILON * scale / eps;
            // Depth-order swaps and visibility cutoffs make rendering piecewise
            // smooth; a step within eps shows up as quotients that disagree.
            let (up, down) = ((hi2 - base) * 2.0 / eps, (base - lo2) * 2.0 / eps);
            let disagree = |a: f64, b: f64| (a - b).abs() > KINK_RATIO * (a.abs() + b.abs()) + 4.0 * noise;
            if disagree(wide, numeric) || disagree(up, down) {
                report.skipped += 1;
                continue;
            }
            let err = ((grads[j] - numeric).abs() - noise).max(0.0) / (grads[j].abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if grads[j].abs() > 100.0 * noise {
                report.resolved += 1;
            }
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j));
                report.worst_values = (grads[j], numeric);
            }
        }
    }
    Ok(report)
}

/// Small enough that every parameter entry can be checked.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 8,
        dim: 16,
        vit_blocks: 1,
        encoder_blocks: 1,
        decoder_blocks: 1,
        latent: [2, 2],
        expr_dim: 2,
        expr_tokens: 2,
        expr_hidden: 4,
        expr_layers: 2,
        up_levels: 1,
        up_width: 2,
        map_upsample_extra: 1,
        gaussians: 16,
        pe_freqs: 1,
        ffn_mult: 1,
        head_hidden: 4,
        ..ModelConfig::desk()
    }
}

fn probe_image(seed: u64, size: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1111);
    uniform(&mut rng, &[3, size, size], 0.0, 1.0)
}

fn probe_camera(size: usize, az: f64) -> Camera {
    Camera::orbit(az, 0.1, 3.0, Intrinsics::square(size, 1.1)).expect("valid orbit")
}

const MODEL_EPS: f64 = 1e-5;
/// Thousands of overlapping splats put visibility steps close together.
const DESK_RENDER_EPS: f64 = 1e-7;

pub fn model_cases() -> Vec<Case> {
    use Group::Model;
    vec![
        Case {
            name: "encoder..render (all)",
            group: Model,
            run: |s| {
                let cfg = micro_config();
                let (net, mut store) = AvatarNet::new::<f64>(cfg, s)?;
                let img = probe_image(s, 16);
                let (cam_in, cam_out) = (probe_camera(16, 0.0), probe_camera(16, 0.4));
                let settings = RenderSettings::default();
                let f = |p: &ParamStore<f64>| -> Result<Tensor<f64>> {
                    let code = net.encode(p, &img, &cam_in)?;
                    let g = net.decode(p, &code, &[0.3, -0.2], DecodeMode::Monocular)?;
                    project_positive(&render(&g, &cam_out, &settings)?, s)
                };
                sampled_param_check(&mut store, &f, usize::MAX, MODEL_EPS, s)
            },
        },
        Case {
            name: "encoder code norm (desk)",
            group: Model,
            run: |s| {
                let cfg = ModelConfig::desk();
                let size = cfg.image_size;
                let (net, mut store) = AvatarNet::new::<f64>(cfg, s)?;
                let img = probe_image(s, size);
                let cam = probe_camera(size, 0.0);
                let f = |p: &ParamStore<f64>| -> Result<Tensor<f64>> { Ok(net.encode(p, &img, &cam)?.square().sum()) };
                sampled_param_check(&mut store, &f, 2, MODEL_EPS, s)
            },
        },
        Case {
            name: "decode..render (desk)",
            group: Model,
            run: |s| {
                let cfg = ModelConfig::desk();
                let size = cfg.image_size;
                let z: Vec<f64> = (0..cfg.expr_dim).map(|i| ((i as f64 + s as f64) * 0.7).sin()).collect();
                let (net, mut store) = AvatarNet::new::<f64>(cfg, s)?;
                let code = net.encode(&store.frozen(), &probe_image(s, size), &probe_camera(size, 0.0))?;
                let cam = probe_camera(size, 0.5);
                let settings = RenderSettings::default();
                let f = |p: &ParamStore<f64>| -> Result<Tensor<f64>> {
                    let g = net.decode(p, &code, &z, DecodeMode::Inference)?;
                    Ok(render(&g, &cam, &settings)?.mean())
                };
                sampled_param_check(&mut store, &f, 2, DESK_RENDER_EPS, s)
            },
        },
    ]
}

pub fn all_cases() -> Vec<Case> {
    [core_cases(), loss_cases(), raster_cases(), model_cases()].concat()
}

/// Runs every case for seeds `0..seeds`, reporting the worst error per case.
pub fn run_cases(cases: &[Case], seeds: u64, mut on_case: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for c in cases {
        let mut r = CaseResult { name: c.name, group: c.group, seeds: seeds as usize, checked: 0, max_rel_err: 0.0, skipped: 0, resolved: 0, worst_values: (0.0, 0.0), worst_seed: 0 };
        for seed in 0..seeds {
            let rep = (c.run)(seed)?;
            r.checked += rep.checked;
            r.skipped += rep.skipped;
            r.resolved += rep.resolved;
            if rep.max_rel_err > r.max_rel_err {
                r.max_rel_err = rep.max_rel_err;
                r.worst_seed = seed;
                r.worst_values = rep.worst_values;
            }
        }
        on_case(&r);
        out.push(r);
    }
    Ok(out)
}

//! Optimization: the mixed-provenance training loop, avatar fitting, code
//! interpolation, held-out evaluation and the variant ablation.

mod adam;
mod ablation;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablation::{run_ablation, AblationResult, AblationRow};
pub use adam::{Adam, MissingGrad};

use crate::geometry::Camera;
use crate::model::{AvatarNet, DecodeMode, ModelError, ParamStore, Provenance};
use crate::objectives::{psnr, rec_loss, ssim_value, FeatureExtractor, LossWeights, RandomPyramid};
use crate::raster::{render, RasterError, RenderSettings};
use crate::synthdata::{Dataset, Split, SynthSample};
use crate::tensor::{Float, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("training config: {0}")]
    Config(String),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "only2D")]
    Only2D,
    #[serde(rename = "only3D")]
    Only3D,
    #[serde(rename = "mixedNoSinks")]
    MixedNoSinks,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Only2D, Variant::Only3D, Variant::MixedNoSinks, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Only2D => "only2D",
            Variant::Only3D => "only3D",
            Variant::MixedNoSinks => "mixedNoSinks",
            Variant::Full => "full",
        }
    }

    pub fn uses(self, p: Provenance) -> bool {
        match self {
            Variant::Only2D => p == Provenance::Monocular,
            Variant::Only3D => p == Provenance::MultiView,
            Variant::MixedNoSinks | Variant::Full => true,
        }
    }

    /// Bias token for a training sample. Only the full model tells the two
    /// sources apart; every other variant trains the single token that is
    /// also used at inference.
    pub fn decode_mode(self, p: Provenance) -> DecodeMode {
        match self {
            Variant::Full => p.into(),
            _ => DecodeMode::MultiView,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown variant {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Monocular to multi-view batch proportions for variants using both.
    pub mix_ratio: [usize; 2],
    pub seed: u64,
    pub variant: Variant,
    pub loss: LossWeights,
    pub log_every: usize,
    /// Seed of the frozen feature extractor.
    pub feature_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            total_steps: 20_000,
            mix_ratio: [3, 1],
            seed: 1,
            variant: Variant::Full,
            loss: LossWeights::default(),
            log_every: 100,
            feature_seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return fail("batch_size and log_every must be positive".into());
        }
        if self.mix_ratio.iter().sum::<usize>() == 0 {
            return fail("mix_ratio must not be all zero".into());
        }
        self.loss.validate().map_err(TrainError::Config)
    }
}

/// Converts a stored sample image to a tensor.
pub fn image_tensor<T: Float>(s: &SynthSample) -> Tensor<T> {
    let (w, h) = (s.camera.width, s.camera.height);
    Tensor::from_f64(&s.image(), &[3, h, w]).expect("image matches camera")
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub variant: Variant,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub feat: f64,
    pub psnr: f64,
}

pub const LOG_HEADER: &str = "step,variant,loss,l1,ssim,feat,psnr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.4}",
            self.step, self.variant, self.loss, self.l1, self.ssim, self.feat, self.psnr
        )
    }
}

/// How often each bias token was fed to the decoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounters {
    pub z2d: usize,
    pub z3d: usize,
    pub monocular_samples: usize,
    pub multiview_samples: usize,
}

impl TokenCounters {
    fn record(&mut self, p: Provenance, mode: DecodeMode) {
        match p {
            Provenance::Monocular => self.monocular_samples += 1,
            Provenance::MultiView => self.multiview_samples += 1,
        }
        match mode {
            DecodeMode::Monocular => self.z2d += 1,
            DecodeMode::MultiView | DecodeMode::Inference => self.z3d += 1,
        }
    }
}

/// Training samples of a variant with the source frame chosen for each.
#[derive(Debug, Clone)]
pub struct TrainingPlan {
    /// Sample indices per provenance: `[monocular, multi-view]`.
    pub pools: [Vec<usize>; 2],
    /// Candidate source frames per identity.
    pub sources: BTreeMap<usize, Vec<usize>>,
}

fn is_frontal(s: &SynthSample) -> bool {
    s.azimuth.abs() < 1e-9
}

impl TrainingPlan {
    pub fn new(ds: &Dataset, variant: Variant) -> Result<Self> {
        let mut pools = [Vec::new(), Vec::new()];
        let mut sources: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in ds.samples.iter().enumerate() {
            if s.split != Split::Train || !variant.uses(s.provenance) {
                continue;
            }
            let k = match s.provenance {
                Provenance::Monocular => 0,
                Provenance::MultiView => 1,
            };
            pools[k].push(i);
            if s.provenance == Provenance::Monocular || is_frontal(s) {
                sources.entry(s.identity_id).or_default().push(i);
            }
        }
        if pools.iter().all(Vec::is_empty) {
            return Err(TrainError::Config(format!("dataset has no training samples for variant {variant}")));
        }
        if variant == Variant::Only2D && !pools[1].is_empty() || variant == Variant::Only3D && !pools[0].is_empty() {
            return Err(TrainError::Config(format!("variant {variant} received samples it must not use")));
        }
        for (k, pool) in pools.iter().enumerate() {
            for &i in pool {
                let id = ds.samples[i].identity_id;
                if !sources.contains_key(&id) {
                    return Err(TrainError::Config(format!(
                        "identity {id} has no frontal frame to use as source ({})",
                        ["monocular", "multi-view"][k]
                    )));
                }
            }
        }
        Ok(Self { pools, sources })
    }

    /// Source frame for a target: another frame of the same identity when
    /// one exists, otherwise the target's own frontal frame.
    pub fn source_for(&self, ds: &Dataset, target: usize, rng: &mut impl Rng) -> usize {
        let t = &ds.samples[target];
        let cands = &self.sources[&t.identity_id];
        let others: Vec<usize> = cands.iter().copied().filter(|&c| ds.samples[c].frame != t.frame).collect();
        if !others.is_empty() {
            return others[rng.gen_range(0..others.len())];
        }
        cands[rng.gen_range(0..cands.len())]
    }

    fn draw(&self, rng: &mut impl Rng, mix: [usize; 2]) -> usize {
        let weights = [
            if self.pools[0].is_empty() { 0 } else { mix[0] },
            if self.pools[1].is_empty() { 0 } else { mix[1] },
        ];
        let total = weights[0] + weights[1];
        let k = if total == 0 {
            usize::from(self.pools[0].is_empty())
        } else if rng.gen_range(0..total) < weights[0] {
            0
        } else {
            1
        };
        self.pools[k][rng.gen_range(0..self.pools[k].len())]
    }
}

/// Everything produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub counters: TokenCounters,
    pub adam: Adam,
    /// Mean loss of every step.
    pub step_losses: Vec<f64>,
}

/// Trains `store` in place on the training split of `ds`.
pub fn train<T: Float>(
    net: &AvatarNet,
    store: &mut ParamStore<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    settings: &RenderSettings,
    mut on_log: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let plan = TrainingPlan::new(ds, cfg.variant)?;
    let fx = RandomPyramid::<T>::new(cfg.feature_seed);
    let mut adam = Adam::new(store, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7ea1);
    let mut counters = TokenCounters::default();
    let mut log = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.total_steps);
    let mut window = [0.0f64; 5];
    let mut window_n = 0usize;
    for step in 0..cfg.total_steps {
        let frac = step as f64 / cfg.total_steps.max(1) as f64;
        let mut sums = [0.0f64; 5];
        for _ in 0..cfg.batch_size {
            let target = plan.draw(&mut rng, cfg.mix_ratio);
            let source = plan.source_for(ds, target, &mut rng);
            let (t, s) = (&ds.samples[target], &ds.samples[source]);
            let mode = cfg.variant.decode_mode(t.provenance);
            counters.record(t.provenance, mode);
            let target_img = image_tensor::<T>(t);
            let pred = forward(net, store, s, &t.z_tracked, mode, &t.camera, settings)?;
            let l = rec_loss(&pred, &target_img, &cfg.loss, &fx, frac)?;
            l.total.mul_scalar(1.0 / cfg.batch_size as f64).backward()?;
            let p = psnr(&pred.to_f64_vec(), &target_img.to_f64_vec());
            for (acc, v) in sums.iter_mut().zip([l.total.item().f64(), l.l1, l.ssim, l.feat, p]) {
                *acc += v / cfg.batch_size as f64;
            }
        }
        if !sums[0].is_finite() {
            return Err(TrainError::Input(format!("loss became non-finite at step {step}")));
        }
        adam.step(store, MissingGrad::Skip)?;
        store.zero_grad();
        step_losses.push(sums[0]);
        for (w, s) in window.iter_mut().zip(sums) {
            *w += s;
        }
        window_n += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            let n = window_n as f64;
            let row = LogRow {
                step: step + 1,
                variant: cfg.variant,
                loss: window[0] / n,
                l1: window[1] / n,
                ssim: window[2] / n,
                feat: window[3] / n,
                psnr: window[4] / n,
            };
            on_log(&row);
            log.push(row);
            window = [0.0; 5];
            window_n = 0;
        }
    }
    Ok(TrainOutcome { log, counters, adam, step_losses })
}

/// Encode a source frame, decode with `z_exp` and render at `camera`.
pub fn forward<T: Float>(
    net: &AvatarNet,
    store: &ParamStore<T>,
    source: &SynthSample,
    z_exp: &[f64],
    mode: DecodeMode,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<Tensor<T>> {
    let code = net.encode(store, &image_tensor::<T>(source), &source.camera)?;
    let g = net.decode(store, &code, z_exp, mode)?;
    Ok(render(&g, camera, settings)?)
}

/// One observation for fitting.
#[derive(Debug, Clone)]
pub struct Observation {
    /// `[3, H, W]`
    pub image: Vec<f64>,
    pub camera: Camera,
    pub z_exp: Vec<f64>,
}

impl From<&SynthSample> for Observation {
    fn from(s: &SynthSample) -> Self {
        Self { image: s.image(), camera: s.camera, z_exp: s.z_tracked.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T: Float> {
    pub code: Tensor<T>,
    /// Summed loss before each step and after the last one.
    pub losses: Vec<f64>,
}

/// Optimizes only the avatar code against the observations, starting from
/// the encoding of the first one. `store` is only read.
#[allow(clippy::too_many_arguments)]
pub fn fit_avatar<T: Float>(
    net: &AvatarNet,
    store: &ParamStore<T>,
    observations: &[Observation],
    steps: usize,
    learning_rate: f64,
    weights: &LossWeights,
    fx: &dyn FeatureExtractor<T>,
    settings: &RenderSettings,
) -> Result<FitOutcome<T>> {
    let first = observations.first().ok_or_else(|| TrainError::Input("fitting needs at least one observation".into()))?;
    let frozen = store.frozen();
    let (w, h) = (first.camera.width, first.camera.height);
    let img0 = Tensor::<T>::from_f64(&first.image, &[3, h, w])?;
    let init = net.encode(&frozen, &img0, &first.camera)?;
    let mut code_store = ParamStore::<T>::new();
    let code_id = code_store.add("code".into(), init.detach());
    let targets: Vec<Tensor<T>> = observations
        .iter()
        .map(|o| Tensor::from_f64(&o.image, &[3, o.camera.height, o.camera.width]))
        .collect::<std::result::Result<_, _>>()?;
    let mut adam = Adam::new(&code_store, learning_rate);
    let mut losses = Vec::with_capacity(steps + 1);
    let evaluate = |code_store: &ParamStore<T>, backward: bool| -> Result<f64> {
        let code = code_store.get(code_id);
        let mut total = 0.0;
        for (o, target) in observations.iter().zip(&targets) {
            let g = net.decode(&frozen, code, &o.z_exp, DecodeMode::Inference)?;
            let pred = render(&g, &o.camera, settings)?;
            let l = rec_loss(&pred, target, weights, fx, 1.0)?;
            total += l.total.item().f64();
            if backward {
                l.total.backward()?;
            }
        }
        Ok(total)
    };
    for _ in 0..steps {
        losses.push(evaluate(&code_store, true)?);
        adam.step(&mut code_store, MissingGrad::Error)?;
        code_store.zero_grad();
    }
    losses.push(evaluate(&code_store, false)?);
    Ok(FitOutcome { code: code_store.get(code_id).detach(), losses })
}

/// Convex combination `alpha a + (1 - alpha) b`.
pub fn interpolate_codes<T: Float>(a: &Tensor<T>, b: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Input(format!("alpha {alpha} is outside [0, 1]")));
    }
    if a.shape() != b.shape() {
        return Err(TensorError::Shape { op: "interpolate", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }.into());
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| T::of(alpha * x.f64() + (1.0 - alpha) * y.f64())).collect();
    Ok(Tensor::from_vec(data, a.shape())?)
}

/// Azimuths, in degrees, at which held-out identities are scored.
pub const EVAL_AZIMUTHS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub identity_id: usize,
    pub azimuth_deg: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Renders of one held-out identity from its frontal input.
#[derive(Debug, Clone)]
pub struct EvalRenders {
    pub identity_id: usize,
    pub input: Vec<f64>,
    /// `(azimuth in degrees, prediction, ground truth)`
    pub views: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

fn view_at(ds: &Dataset, id: usize, az_deg: f64) -> Option<&SynthSample> {
    ds.samples_of(id).find(|s| {
        let d = (s.azimuth.to_degrees() - az_deg).rem_euclid(360.0);
        d.min(360.0 - d) < 1e-6
    })
}

/// Feed-forward evaluation on held-out identities: encode the frontal view,
/// drive with its tracked code in inference mode, score each azimuth.
pub fn evaluate<T: Float>(
    net: &AvatarNet,
    store: &ParamStore<T>,
    ds: &Dataset,
    settings: &RenderSettings,
) -> Result<(Vec<EvalRow>, Vec<EvalRenders>)> {
    let frozen = store.frozen();
    let mut rows = Vec::new();
    let mut renders = Vec::new();
    for id in ds.ids(Split::HeldOut, None) {
        let front = view_at(ds, id, 0.0).ok_or_else(|| TrainError::Input(format!("identity {id} has no frontal view")))?;
        let code = net.encode(&frozen, &image_tensor::<T>(front), &front.camera)?;
        let g = net.decode(&frozen, &code, &front.z_tracked, DecodeMode::Inference)?;
        let mut rec = EvalRenders { identity_id: id, input: front.image(), views: Vec::new() };
        for az in EVAL_AZIMUTHS {
            let view = view_at(ds, id, az).ok_or_else(|| TrainError::Input(format!("identity {id} has no {az} degree view")))?;
            let pred = render(&g, &view.camera, settings)?.to_f64_vec();
            let gt = view.image();
            let (w, h) = (view.camera.width, view.camera.height);
            rows.push(EvalRow { identity_id: id, azimuth_deg: az, psnr: psnr(&pred, &gt), ssim: ssim_value(&pred, &gt, h, w)? });
            rec.views.push((az, pred, gt));
        }
        renders.push(rec);
    }
    if rows.is_empty() {
        return Err(TrainError::Input("dataset has no held-out identities".into()));
    }
    Ok((rows, renders))
}

/// Mean PSNR and SSIM per azimuth.
pub fn summarize(rows: &[EvalRow]) -> Vec<(f64, f64, f64)> {
    EVAL_AZIMUTHS
        .iter()
        .map(|&az| {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.azimuth_deg == az).collect();
            let n = sel.len().max(1) as f64;
            (az, sel.iter().map(|r| r.psnr).sum::<f64>() / n, sel.iter().map(|r| r.ssim).sum::<f64>() / n)
        })
        .collect()
}

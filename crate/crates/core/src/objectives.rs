//! Image reconstruction losses and metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::layers::normal_tensor;
use crate::tensor::{check_same_shape, ssim_window, Float, Result, Tensor, TensorError};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_ssim: f64,
    pub w_feat: f64,
    /// Fraction of training after which the feature term switches on.
    pub feat_start: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_l1: 1.0, w_ssim: 1.0, w_feat: 1.0, feat_start: 0.4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if [self.w_l1, self.w_ssim, self.w_feat].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err("loss weights must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.feat_start) {
            return Err(format!("feat_start {} is outside [0, 1]", self.feat_start));
        }
        Ok(())
    }
}

pub fn l1_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("l1_loss", pred, target)?;
    Ok(pred.sub(target)?.abs().mean())
}

/// Mean structural similarity of two `[C, H, W]` images, Gaussian window,
/// valid padding.
pub fn ssim<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("ssim", pred, target)?;
    let k = ssim_window(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (pred, target);
    let mx = x.blur_valid(&k)?;
    let my = y.blur_valid(&k)?;
    let mxx = mx.mul(&mx)?;
    let myy = my.mul(&my)?;
    let mxy = mx.mul(&my)?;
    let sxx = x.mul(x)?.blur_valid(&k)?.sub(&mxx)?;
    let syy = y.mul(y)?.blur_valid(&k)?.sub(&myy)?;
    let sxy = x.mul(y)?.blur_valid(&k)?.sub(&mxy)?;
    let num = mxy.mul_scalar(2.0).add_scalar(SSIM_C1).mul(&sxy.mul_scalar(2.0).add_scalar(SSIM_C2))?;
    let den = mxx.add(&myy)?.add_scalar(SSIM_C1).mul(&sxx.add(&syy)?.add_scalar(SSIM_C2))?;
    Ok(num.div(&den)?.mean())
}

pub fn ssim_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(ssim(pred, target)?.neg().add_scalar(1.0))
}

/// Maps an image to a list of feature maps compared by the feature loss.
pub trait FeatureExtractor<T: Float>: Send + Sync {
    fn features(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

/// Frozen pyramid of random 4x4 stride-2 convolutions with leaky ReLU; every
/// level is a tap. Image sides must be divisible by 16.
#[derive(Debug, Clone)]
pub struct RandomPyramid<T: Float> {
    kernels: Vec<Tensor<T>>,
}

impl<T: Float> RandomPyramid<T> {
    pub const LEVELS: usize = 4;

    pub fn new(seed: u64) -> Self {
        let widths = [3, 8, 16, 16, 16];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = (0..Self::LEVELS)
            .map(|l| {
                let fan_in = widths[l] * 16;
                normal_tensor(&mut rng, &[widths[l + 1], widths[l], 4, 4], (2.0 / fan_in as f64).sqrt())
            })
            .collect();
        Self { kernels }
    }
}

impl<T: Float> FeatureExtractor<T> for RandomPyramid<T> {
    fn features(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut x = image.clone();
        let mut taps = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            x = x.conv2d(k, None, 2, 1)?.leaky_relu(0.2);
            taps.push(x.clone());
        }
        Ok(taps)
    }
}

/// Mean over taps of the mean absolute feature difference.
pub fn feature_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, fx: &dyn FeatureExtractor<T>) -> Result<Tensor<T>> {
    check_same_shape("feature_loss", pred, target)?;
    let fp = fx.features(pred)?;
    let ft = fx.features(&target.detach())?;
    if fp.is_empty() {
        return Err(TensorError::Config { op: "feature_loss", msg: "extractor has no taps".into() });
    }
    let mut total = Tensor::scalar(T::zero());
    for (a, b) in fp.iter().zip(&ft) {
        total = total.add(&a.sub(b)?.abs().mean())?;
    }
    Ok(total.mul_scalar(1.0 / fp.len() as f64))
}

/// Reconstruction loss with the values of its terms for logging. Terms with
/// zero weight are skipped; `feat` is zero before the feature phase.
#[derive(Debug, Clone)]
pub struct RecLoss<T: Float> {
    pub total: Tensor<T>,
    pub l1: f64,
    pub ssim: f64,
    pub feat: f64,
}

pub fn rec_loss<T: Float>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weights: &LossWeights,
    fx: &dyn FeatureExtractor<T>,
    step_fraction: f64,
) -> Result<RecLoss<T>> {
    let mut total = Tensor::scalar(T::zero());
    let mut out = (0.0, 0.0, 0.0);
    if weights.w_l1 > 0.0 {
        let l = l1_loss(pred, target)?;
        out.0 = l.item().f64();
        total = total.add(&l.mul_scalar(weights.w_l1))?;
    }
    if weights.w_ssim > 0.0 {
        let l = ssim_loss(pred, target)?;
        out.1 = l.item().f64();
        total = total.add(&l.mul_scalar(weights.w_ssim))?;
    }
    if weights.w_feat > 0.0 && step_fraction >= weights.feat_start {
        let l = feature_loss(pred, target, fx)?;
        out.2 = l.item().f64();
        total = total.add(&l.mul_scalar(weights.w_feat))?;
    }
    Ok(RecLoss { total, l1: out.0, ssim: out.1, feat: out.2 })
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`; identical images
/// give `+inf`.
pub fn psnr(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "psnr on different sizes");
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// SSIM of two `[3, H, W]` images given as flat buffers.
pub fn ssim_value(pred: &[f64], target: &[f64], height: usize, width: usize) -> Result<f64> {
    let a = Tensor::<f64>::from_f64(pred, &[3, height, width])?;
    let b = Tensor::<f64>::from_f64(target, &[3, height, width])?;
    Ok(ssim(&a, &b)?.item())
}

//! Parameterized building blocks: linear maps, normalization, convolution and
//! the pre-norm attention block.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ParamId, ParamStore};
use crate::tensor::{Float, Result, Tensor, TensorError};

/// Samples `N(0, std^2)` values into a tensor of the given shape.
pub(crate) fn normal_tensor<T: Float>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| T::of(dist.sample(rng))).collect(), shape).expect("positive shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]`
    pub weight: ParamId,
    /// `[out]`
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = normal_tensor(rng, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))),
        }
    }

    pub fn without_bias<T: Float>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = normal_tensor(rng, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        Self { weight: store.add(format!("{name}.weight"), w), bias: None }
    }

    /// `x [N, in] -> [N, out]`
    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(store.get(self.weight))?;
        match self.bias {
            Some(b) => y.add(store.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(store.get(self.gain), store.get(self.bias), LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = normal_tensor(rng, &[c_out, c_in, kernel, kernel], (1.0 / fan_in as f64).sqrt());
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(store.get(self.weight), Some(store.get(self.bias)), 1, self.padding)
    }
}

/// Head count used for a model width: one head per 32 channels, at least two.
pub fn head_count(dim: usize) -> usize {
    (dim / 32).max(2)
}

/// Scaled dot-product attention of `q [Nq, D]` over `k, v [Nk, D]` split into
/// `heads` heads, concatenated back to `[Nq, D]`.
pub fn multihead_attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config {
            op: "attention",
            msg: format!("width {d} is not divisible into {heads} heads"),
        });
    }
    let dh = d / heads;
    let qh = q.reshape(&[nq, heads, dh])?.permute(&[1, 0, 2])?;
    let kt = k.reshape(&[nk, heads, dh])?.permute(&[1, 2, 0])?;
    let vh = v.reshape(&[nk, heads, dh])?.permute(&[1, 0, 2])?;
    let scores = qh.matmul(&kt)?.mul_scalar(1.0 / (dh as f64).sqrt());
    let weights = scores.softmax(2)?;
    weights.matmul(&vh)?.permute(&[1, 0, 2])?.reshape(&[nq, d])
}

/// Pre-norm attention block: `x + Wo * Attn(LN(x) Wq, LN(kv) Wk, LN(kv) Wv)`
/// followed by a GELU feed-forward with its own pre-norm and residual.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> std::result::Result<Self, TensorError> {
        let heads = head_count(dim);
        if dim % heads != 0 {
            return Err(TensorError::Config {
                op: "attention",
                msg: format!("width {dim} is not divisible into {heads} heads"),
            });
        }
        let hidden = dim * ffn_mult;
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim),
            to_q: Linear::new(store, &format!("{name}.to_q"), dim, dim, rng),
            // a key bias shifts every logit of a query equally and has no effect
            to_k: Linear::without_bias(store, &format!("{name}.to_k"), dim, dim, rng),
            to_v: Linear::new(store, &format!("{name}.to_v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, hidden, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), hidden, dim, rng),
            heads,
        })
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>, kv: &Tensor<T>) -> Result<Tensor<T>> {
        let xn = self.norm_q.forward(store, x)?;
        let kvn = self.norm_kv.forward(store, kv)?;
        let q = self.to_q.forward(store, &xn)?;
        let k = self.to_k.forward(store, &kvn)?;
        let v = self.to_v.forward(store, &kvn)?;
        let attended = multihead_attention(&q, &k, &v, self.heads)?;
        let x = x.add(&self.out.forward(store, &attended)?)?;
        let h = self.ff_in.forward(store, &self.norm_ff.forward(store, &x)?)?.gelu();
        x.add(&self.ff_out.forward(store, &h)?)
    }
}

//! Neural-network operators with hand-written backward rules.

use super::{gemm, Float, MatView, Result, Tensor, TensorError};

/// Normalized 1-D Gaussian kernel of odd `size`.
pub fn ssim_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn expect_rank<T: Float>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Config {
            op,
            msg: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

/// Bilinear source taps for `out` samples resampled from `len` (half-pixel centers).
fn bilinear_taps(len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Float> Tensor<T> {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis("softmax", axis)?;
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut m = T::neg_infinity();
                for a in 0..len {
                    m = m.max(x[at(a)]);
                }
                if x[at(0)].is_nan() {
                    m = x[at(0)];
                }
                let mut s = T::zero();
                for a in 0..len {
                    let e = (x[at(a)] - m).exp();
                    y[at(a)] = e;
                    s += e;
                }
                for a in 0..len {
                    y[at(a)] /= s;
                }
            }
        }
        Ok(Tensor::from_op(y, shape.to_vec(), &[self], move |y, g, _| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: T = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                    for a in 0..len {
                        gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Normalizes each row of the last axis to zero mean and unit (biased)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape().last().ok_or(TensorError::Config {
            op: "layer_norm",
            msg: "cannot normalize a rank-0 tensor".into(),
        })?;
        for p in [gain, bias] {
            if p.shape() != [d] {
                return Err(TensorError::Shape { op: "layer_norm", lhs: self.shape().to_vec(), rhs: p.shape().to_vec() });
            }
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (gd, bd) = (gain.data(), bias.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let gain_arc = gain.data_arc();
        Ok(Tensor::from_op(y, self.shape().to_vec(), &[self, gain, bias], move |_, g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dh = g[r * d + j] * gain_arc[j];
                        m1 += dh;
                        m2 += dh * xhat[r * d + j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        let dh = g[r * d + j] * gain_arc[j];
                        gx[r * d + j] = inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
                    }
                }
                gx
            });
            let ggain = needs[1].then(|| {
                let mut acc = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        acc[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                acc
            });
            let gbias = needs[2].then(|| {
                let mut acc = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        acc[j] += g[r * d + j];
                    }
                }
                acc
            });
            vec![gx, ggain, gbias]
        }))
    }

    /// 2-D cross-correlation of `[C, H, W]` with `[C', C, kh, kw]`, plus an
    /// optional per-output-channel bias.
    pub fn conv2d(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        expect_rank("conv2d", self, 3)?;
        expect_rank("conv2d", kernel, 4)?;
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let ks = kernel.shape();
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        if ks[1] != c {
            return Err(TensorError::Shape { op: "conv2d", lhs: self.shape().to_vec(), rhs: ks.to_vec() });
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(TensorError::Shape { op: "conv2d", lhs: ks.to_vec(), rhs: b.shape().to_vec() });
            }
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if stride == 0 || ph < kh || pw < kw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(TensorError::Config {
                op: "conv2d",
                msg: format!(
                    "kernel {kh}x{kw} with stride {stride}, padding {padding} does not tile a {h}x{w} input"
                ),
            });
        }
        let (ho, wo) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
        let hw = ho * wo;
        let kdim = c * kh * kw;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
        let x = self.data();

        // Column buffer [C*kh*kw, Ho*Wo]; row (ci, dy, dx).
        let col: Vec<T> = if pointwise {
            Vec::new()
        } else {
            let mut col = vec![T::zero(); kdim * hw];
            for ci in 0..c {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let row = (ci * kh + dy) * kw + dx;
                        let dst = &mut col[row * hw..(row + 1) * hw];
                        for oy in 0..ho {
                            let iy = (oy * stride + dy) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                            for ox in 0..wo {
                                let ix = (ox * stride + dx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[oy * wo + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
            col
        };
        let col_src: &[T] = if pointwise { x } else { &col };
        let mut out = vec![T::zero(); co * hw];
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bv);
            }
        }
        gemm(
            co,
            kdim,
            hw,
            MatView::row_major(kernel.data(), 0, kdim),
            MatView::row_major(col_src, 0, hw),
            if bias.is_some() { T::one() } else { T::zero() },
            &mut out,
            0,
        );

        let kernel_arc = kernel.data_arc();
        let x_arc = self.data_arc();
        let mut inputs: Vec<&Tensor<T>> = vec![self, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(Tensor::from_op(out, vec![co, ho, wo], &inputs, move |_, g, needs| {
            let col_src: &[T] = if pointwise { &x_arc } else { &col };
            let gk = needs[1].then(|| {
                let mut gk = vec![T::zero(); co * kdim];
                gemm(
                    co,
                    hw,
                    kdim,
                    MatView::row_major(g, 0, hw),
                    MatView::transposed(col_src, 0, hw),
                    T::zero(),
                    &mut gk,
                    0,
                );
                gk
            });
            let gx = needs[0].then(|| {
                let mut gcol = vec![T::zero(); kdim * hw];
                gemm(
                    kdim,
                    co,
                    hw,
                    MatView::transposed(&kernel_arc, 0, kdim),
                    MatView::row_major(g, 0, hw),
                    T::zero(),
                    &mut gcol,
                    0,
                );
                if pointwise {
                    return gcol;
                }
                let mut gx = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let row = (ci * kh + dy) * kw + dx;
                            let src = &gcol[row * hw..(row + 1) * hw];
                            for oy in 0..ho {
                                let iy = (oy * stride + dy) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let base = (ci * h + iy as usize) * w;
                                for ox in 0..wo {
                                    let ix = (ox * stride + dx) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        gx[base + ix as usize] += src[oy * wo + ox];
                                    }
                                }
                            }
                        }
                    }
                }
                gx
            });
            let mut grads = vec![gx, gk];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| (0..co).map(|o| g[o * hw..(o + 1) * hw].iter().copied().sum()).collect()));
            }
            grads
        }))
    }

    fn shuffle_map(c_in: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
        // Output index -> input index for [C r^2, H, W] -> [C, rH, rW].
        let c = c_in / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut map = Vec::with_capacity(c_in * h * w);
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let (hh, a) = (y / r, y % r);
                    let (ww, b) = (x / r, x % r);
                    map.push(((ci * r * r + a * r + b) * h + hh) * w + ww);
                }
            }
        }
        map
    }

    /// `[C r^2, H, W] -> [C, rH, rW]` with `out[c, rh+a, rw+b] = in[c r^2 + a r + b, h, w]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        expect_rank("pixel_shuffle", self, 3)?;
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if r == 0 || c_in % (r * r) != 0 {
            return Err(TensorError::Config {
                op: "pixel_shuffle",
                msg: format!("{c_in} channels not divisible by r^2 = {}", r * r),
            });
        }
        let map = Self::shuffle_map(c_in, h, w, r);
        let x = self.data();
        let data: Vec<T> = map.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op(data, vec![c_in / (r * r), h * r, w * r], &[self], move |_, g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (o, &i) in map.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Inverse of [`Tensor::pixel_shuffle`]: `[C, rH, rW] -> [C r^2, H, W]`.
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        expect_rank("pixel_unshuffle", self, 3)?;
        let (c, oh, ow) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if r == 0 || oh % r != 0 || ow % r != 0 {
            return Err(TensorError::Config {
                op: "pixel_unshuffle",
                msg: format!("spatial size {oh}x{ow} not divisible by {r}"),
            });
        }
        let (h, w) = (oh / r, ow / r);
        let map = Self::shuffle_map(c * r * r, h, w, r);
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for (o, &i) in map.iter().enumerate() {
            data[i] = x[o];
        }
        Ok(Tensor::from_op(data, vec![c * r * r, h, w], &[self], move |_, g, _| {
            vec![Some(map.iter().map(|&i| g[i]).collect())]
        }))
    }

    /// Bilinear resize of `[C, H, W]` by an integer factor (half-pixel centers, edge clamp).
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor<T>> {
        expect_rank("upsample_bilinear", self, 3)?;
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let x = self.data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                let wy = T::of(wy);
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let wx = T::of(wx);
                    let top = src[y0 * w + x0] * (T::one() - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (T::one() - wx) + src[y1 * w + x1] * wx;
                    out[(ci * oh + oy) * ow + ox] = top * (T::one() - wy) + bot * wy;
                }
            }
        }
        Ok(Tensor::from_op(out, vec![c, oh, ow], &[self], move |_, g, _| {
            let mut gx = vec![T::zero(); c * h * w];
            for ci in 0..c {
                let dst = &mut gx[ci * h * w..(ci + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    let wy = T::of(wy);
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let wx = T::of(wx);
                        let gv = g[(ci * oh + oy) * ow + ox];
                        let (gt, gb) = (gv * (T::one() - wy), gv * wy);
                        dst[y0 * w + x0] += gt * (T::one() - wx);
                        dst[y0 * w + x1] += gt * wx;
                        dst[y1 * w + x0] += gb * (T::one() - wx);
                        dst[y1 * w + x1] += gb * wx;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour resize of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor<T>> {
        expect_rank("upsample_nearest", self, 3)?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let map: Vec<usize> = (0..c)
            .flat_map(|ci| {
                (0..oh).flat_map(move |y| (0..ow).map(move |x| (ci * h + y / factor) * w + x / factor))
            })
            .collect();
        let x = self.data();
        let data = map.iter().map(|&i| x[i]).collect();
        let n = self.numel();
        Ok(Tensor::from_op(data, vec![c, oh, ow], &[self], move |_, g, _| {
            let mut gx = vec![T::zero(); n];
            for (o, &i) in map.iter().enumerate() {
                gx[i] += g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Samples `[C, H, W]` at `N` texture coordinates `(u, v)` in `[0, 1]^2`,
    /// returning `[N, C]`. Texel `(i, j)` has its center at
    /// `((j + 0.5) / W, (i + 0.5) / H)`; lookups clamp at the border. The
    /// coordinates are constants: no gradient flows to them.
    pub fn grid_sample(&self, coords: &[[f64; 2]]) -> Result<Tensor<T>> {
        expect_rank("grid_sample", self, 3)?;
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let mut taps = Vec::with_capacity(coords.len());
        for (q, &[u, v]) in coords.iter().enumerate() {
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                return Err(TensorError::Input {
                    op: "grid_sample",
                    msg: format!("coordinate {q} = ({u}, {v}) outside [0, 1]^2"),
                });
            }
            let fx = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let fy = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            taps.push([
                (y0 * w + x0, T::of((1.0 - ax) * (1.0 - ay))),
                (y0 * w + x1, T::of(ax * (1.0 - ay))),
                (y1 * w + x0, T::of((1.0 - ax) * ay)),
                (y1 * w + x1, T::of(ax * ay)),
            ]);
        }
        let n = coords.len();
        let x = self.data();
        let hw = h * w;
        let mut out = vec![T::zero(); n * c];
        for (q, tap) in taps.iter().enumerate() {
            for ci in 0..c {
                let plane = &x[ci * hw..(ci + 1) * hw];
                out[q * c + ci] = tap.iter().map(|&(i, wt)| plane[i] * wt).sum();
            }
        }
        Ok(Tensor::from_op(out, vec![n, c], &[self], move |_, g, _| {
            let mut gx = vec![T::zero(); c * hw];
            for (q, tap) in taps.iter().enumerate() {
                for ci in 0..c {
                    let gv = g[q * c + ci];
                    for &(i, wt) in tap {
                        gx[ci * hw + i] += gv * wt;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Separable depthwise filtering of `[C, H, W]` with a 1-D kernel applied
    /// along both axes, valid padding: output `[C, H-K+1, W-K+1]`.
    pub fn blur_valid(&self, kernel: &[f64]) -> Result<Tensor<T>> {
        expect_rank("blur_valid", self, 3)?;
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let k = kernel.len();
        if k == 0 || k > h || k > w {
            return Err(TensorError::Config {
                op: "blur_valid",
                msg: format!("kernel of {k} taps does not fit a {h}x{w} image"),
            });
        }
        let (ho, wo) = (h - k + 1, w - k + 1);
        let kt: Vec<T> = kernel.iter().map(|&v| T::of(v)).collect();
        let x = self.data();
        let mut out = vec![T::zero(); c * ho * wo];
        let mut tmp = vec![T::zero(); h * wo];
        for ci in 0..c {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for (t, &kv) in kt.iter().enumerate() {
                        s += src[y * w + ox + t] * kv;
                    }
                    tmp[y * wo + ox] = s;
                }
            }
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for (t, &kv) in kt.iter().enumerate() {
                        s += tmp[(oy + t) * wo + ox] * kv;
                    }
                    out[(ci * ho + oy) * wo + ox] = s;
                }
            }
        }
        Ok(Tensor::from_op(out, vec![c, ho, wo], &[self], move |_, g, _| {
            let mut gx = vec![T::zero(); c * h * w];
            let mut gtmp = vec![T::zero(); h * wo];
            for ci in 0..c {
                gtmp.iter_mut().for_each(|v| *v = T::zero());
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = g[(ci * ho + oy) * wo + ox];
                        for (t, &kv) in kt.iter().enumerate() {
                            gtmp[(oy + t) * wo + ox] += gv * kv;
                        }
                    }
                }
                let dst = &mut gx[ci * h * w..(ci + 1) * h * w];
                for y in 0..h {
                    for ox in 0..wo {
                        let gv = gtmp[y * wo + ox];
                        for (t, &kv) in kt.iter().enumerate() {
                            dst[y * w + ox + t] += gv * kv;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn softmax_uniform_and_overflow_safe() {
        let s = Tensor::<f64>::zeros(&[3]).softmax(0).unwrap();
        for v in s.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::<f64>::from_f64(&[1000.0, 0.0], &[2]).unwrap().softmax(0).unwrap();
        assert_eq!(s.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vec(&mut rng, 7);
        let s = Tensor::<f64>::from_f64(&x, &[7]).unwrap().softmax(0).unwrap();
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        for (a, v) in s.to_vec().iter().zip(&x) {
            assert!((a - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_propagates_nan() {
        let s = Tensor::<f64>::from_f64(&[f64::NAN, 0.0], &[2]).unwrap().softmax(0).unwrap();
        assert!(s.to_vec().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::<f64>::ones(&[2]);
        let zero = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::from_f64(&[1.0, 3.0], &[1, 2]).unwrap();
        let y = x.layer_norm(&one, &zero, 1e-12).unwrap().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
        let c = Tensor::from_f64(&[4.0, 4.0], &[1, 2]).unwrap();
        assert_eq!(c.layer_norm(&one, &zero, 1e-5).unwrap().to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::from_f64(&rand_vec(&mut rng, 24), &[3, 8]).unwrap();
        let y = x.layer_norm(&Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-5).unwrap();
        for r in y.to_vec().chunks(8) {
            let m: f64 = r.iter().sum::<f64>() / 8.0;
            let v: f64 = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-4);
        }
    }

    fn conv_oracle(x: &[f64], c: usize, h: usize, w: usize, k: &[f64], co: usize, kh: usize, kw: usize, s: usize, p: usize) -> Vec<f64> {
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (w + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * s + dy) as isize - p as isize;
                                let ix = (ox * s + dx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ci * h + iy as usize) * w + ix as usize]
                                        * k[((o * c + ci) * kh + dy) * kw + dx];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_vec(&mut rng, 2 * 5 * 5);
        let k = rand_vec(&mut rng, 3 * 2 * 9);
        for (s, p) in [(1, 1), (1, 0), (2, 1)] {
            let y = Tensor::<f64>::from_f64(&x, &[2, 5, 5])
                .unwrap()
                .conv2d(&Tensor::from_f64(&k, &[3, 2, 3, 3]).unwrap(), None, s, p)
                .unwrap();
            let expect = conv_oracle(&x, 2, 5, 5, &k, 3, 3, 3, s, p);
            for (a, b) in y.to_vec().iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_f64(&rand_vec(&mut rng, 2 * 4 * 4), &[2, 4, 4]).unwrap();
        let eye = Tensor::from_f64(&[1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
        assert_eq!(x.conv2d(&eye, None, 1, 0).unwrap().to_vec(), x.to_vec());
        let c = Tensor::<f64>::full(&[1, 5, 5], 0.7);
        let avg = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = c.conv2d(&avg, None, 1, 1).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.data()[yy * 5 + xx] - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(x.conv2d(&k, None, 2, 0), Err(TensorError::Config { .. })));
    }

    #[test]
    fn pixel_shuffle_index_arithmetic() {
        let x = Tensor::<f64>::from_f64(&[0.0, 1.0, 2.0, 3.0], &[4, 1, 1]).unwrap();
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(Tensor::<f32>::zeros(&[8, 3, 3]).pixel_shuffle(2).unwrap().shape(), &[2, 6, 6]);
        assert!(Tensor::<f32>::zeros(&[6, 3, 3]).pixel_shuffle(2).is_err());
    }

    #[test]
    fn grid_sample_texel_hits_and_midpoint() {
        let m = Tensor::<f64>::from_f64(&[0.0, 1.0, 2.0, 3.0], &[1, 2, 2]).unwrap();
        let s = m.grid_sample(&[[0.25, 0.25], [0.5, 0.5], [0.75, 0.25], [0.25, 0.75]]).unwrap();
        assert_eq!(s.to_vec(), vec![0.0, 1.5, 1.0, 2.0]);
        assert!(m.grid_sample(&[[1.2, 0.5]]).is_err());
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let c = Tensor::<f64>::full(&[2, 3, 3], 0.25);
        let y = c.upsample_bilinear(2).unwrap();
        assert_eq!(y.shape(), &[2, 6, 6]);
        assert!(y.to_vec().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn blur_preserves_constants() {
        let win = ssim_window(11, 1.5);
        assert!((win.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let c = Tensor::<f64>::full(&[1, 16, 16], 0.3);
        let y = c.blur_valid(&win).unwrap();
        assert_eq!(y.shape(), &[1, 6, 6]);
        assert!(y.to_vec().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }
}

//! Elementwise, broadcasting, reduction and layout operations.

use std::sync::Arc;

use super::{numel, Float, Result, Tensor, TensorError};

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }),
        };
    }
    Ok(out)
}

/// How an input of a broadcasting op is indexed from the output index.
#[derive(Clone)]
pub(crate) enum Gather {
    /// Input has the output's shape.
    Same,
    /// Input equals the trailing block of the output (`out[i] <- in[i % n]`).
    Cycle(usize),
    /// Explicit input index for every output element.
    Map(Arc<Vec<usize>>),
}

impl Gather {
    pub(crate) fn new(input: &[usize], output: &[usize]) -> Self {
        if input == output {
            return Gather::Same;
        }
        let n_in = numel(input);
        // Trailing-dims match with leading ones/absent dims: plain cycling.
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if output.ends_with(&trimmed) {
            return Gather::Cycle(n_in.max(1));
        }
        let rank = output.len();
        let offset = rank - input.len();
        let in_strides = strides(input);
        let mut bstrides = vec![0usize; rank];
        for i in 0..input.len() {
            if input[i] != 1 {
                bstrides[i + offset] = in_strides[i];
            }
        }
        let n = numel(output);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut cur = 0usize;
        for _ in 0..n {
            map.push(cur);
            for d in (0..rank).rev() {
                idx[d] += 1;
                cur += bstrides[d];
                if idx[d] < output[d] {
                    break;
                }
                cur -= bstrides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Gather::Map(Arc::new(map))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Gather::Same => i,
            Gather::Cycle(n) => i % n,
            Gather::Map(m) => m[i],
        }
    }

    /// Sums an output-shaped gradient back onto the input shape.
    pub(crate) fn reduce<T: Float>(&self, g: &[T], n_in: usize) -> Vec<T> {
        match self {
            Gather::Same => g.to_vec(),
            _ => {
                let mut out = vec![T::zero(); n_in];
                for (i, &gi) in g.iter().enumerate() {
                    out[self.index(i)] += gi;
                }
                out
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Float> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: Binary, op: &'static str) -> Result<Tensor<T>> {
        let shape = broadcast_shape(op, self.shape(), other.shape())?;
        let ga = Gather::new(self.shape(), &shape);
        let gb = Gather::new(other.shape(), &shape);
        let (a, b) = (self.data(), other.data());
        let n = numel(&shape);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<T> = match (&ga, &gb) {
            (Gather::Same, Gather::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(a[ga.index(i)], b[gb.index(i)])).collect(),
        };
        let (ad, bd) = (self.data_arc(), other.data_arc());
        let (na, nb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(data, shape, &[self, other], move |_, g, needs| {
            let grad_a = needs[0].then(|| match kind {
                Binary::Add | Binary::Sub => ga.reduce(g, na),
                Binary::Mul => {
                    let scaled: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * bd[gb.index(i)]).collect();
                    ga.reduce(&scaled, na)
                }
                Binary::Div => {
                    let scaled: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi / bd[gb.index(i)]).collect();
                    ga.reduce(&scaled, na)
                }
            });
            let grad_b = needs[1].then(|| match kind {
                Binary::Add => gb.reduce(g, nb),
                Binary::Sub => {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    gb.reduce(&neg, nb)
                }
                Binary::Mul => {
                    let scaled: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * ad[ga.index(i)]).collect();
                    gb.reduce(&scaled, nb)
                }
                Binary::Div => {
                    let scaled: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let y = bd[gb.index(i)];
                            -gi * ad[ga.index(i)] / (y * y)
                        })
                        .collect();
                    gb.reduce(&scaled, nb)
                }
            });
            vec![grad_a, grad_b]
        }))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Div, "div")
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.data_arc();
        Tensor::from_op(data, self.shape().to_vec(), &[self], move |out, g, _| {
            let gx = g
                .iter()
                .zip(input.iter().zip(out))
                .map(|(&gi, (&x, &y))| gi * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let s = T::of(slope);
        self.unary(
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor<T> {
        self.unary(gelu, gelu_grad)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(|x| x.abs(), |x, _| x.signum() * if x == T::zero() { T::zero() } else { T::one() })
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x, _| T::of(2.0) * x)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![total], Vec::new(), &[self], move |_, g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis("sum_axis", axis)?;
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(Tensor::from_op(out, out_shape, &[self], move |_, g, _| {
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub(crate) fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(TensorError::Config {
                op,
                msg: format!("axis {axis} out of range for shape {:?}", self.shape()),
            });
        }
        Ok(())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.share_with_shape(shape.to_vec()))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Config {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of {rank} axes"),
            });
        }
        let in_shape = self.shape();
        let in_strides = strides(in_shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut cur = 0usize;
        for _ in 0..n {
            map.push(cur);
            for d in (0..rank).rev() {
                idx[d] += 1;
                cur += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                cur -= src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        let x = self.data();
        let data: Vec<T> = map.iter().map(|&s| x[s]).collect();
        Ok(Tensor::from_op(data, out_shape, &[self], move |_, g, _| {
            let mut gx = vec![T::zero(); n];
            for (i, &s) in map.iter().enumerate() {
                gx[s] = g[i];
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(TensorError::Config {
                op: "transpose",
                msg: format!("axes ({a}, {b}) out of range for shape {:?}", self.shape()),
            });
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(TensorError::Input {
            op: "concat",
            msg: "no tensors given".into(),
        })?;
        first.check_axis("concat", axis)?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(out, shape, parts, move |_, g, needs| {
            let mut offsets = Vec::with_capacity(lens.len());
            let mut acc = 0;
            for &l in &lens {
                offsets.push(acc);
                acc += l;
            }
            lens.iter()
                .zip(offsets)
                .zip(needs)
                .map(|((&len, off), &need)| {
                    need.then(|| {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + off) * inner;
                            gp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        gp
                    })
                })
                .collect()
        }))
    }

    /// Contiguous slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        self.check_axis("narrow", axis)?;
        let shape = self.shape();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Config {
                op: "narrow",
                msg: format!("range {start}..{} out of bounds for axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&x[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(out, out_shape, &[self], move |_, g, _| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                let s = (o * full + start) * inner;
                gx[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu<T: Float>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Float>(x: T, _y: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1], &[1, 4]).unwrap(), vec![2, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn column_broadcast_uses_explicit_map() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0], &[2, 1]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let r = t(&[1.0, 2.0, 3.0], &[3]);
        assert_eq!(a.mul(&r).unwrap().to_vec(), vec![1.0, 4.0, 9.0, 4.0, 10.0, 18.0]);
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axes() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).requires_grad();
        let b = t(&[10.0, 20.0], &[2, 1]).requires_grad();
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![6.0, 15.0]);
        assert_eq!(a.grad().unwrap(), vec![10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn permute_matches_index_formula() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = t(&data, &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(y.data()[k * 6 + i * 3 + j], data[i * 12 + j * 4 + k]);
                }
            }
        }
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.narrow(1, 2, 1).unwrap().to_vec(), b.to_vec());
        assert_eq!(c.narrow(1, 0, 2).unwrap().to_vec(), a.to_vec());
        assert!(Tensor::concat(&[&a, &t(&[1.0; 3], &[3, 1])], 1).is_err());
    }

    #[test]
    fn sum_axis_middle() {
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let s = t(&data, &[2, 3, 2]).sum_axis(1).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.to_vec(), vec![6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
    }
}

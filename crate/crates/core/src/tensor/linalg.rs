use super::ops::{broadcast_shape, Gather};
use super::{gemm, numel, Float, MatView, Result, Tensor, TensorError};

impl<T: Float> Tensor<T> {
    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]` with
    /// broadcasting over the leading dimensions.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || TensorError::Shape { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape("matmul", batch_a, batch_b).map_err(|_| mismatch())?;
        let nb = numel(&batch);
        let ga = Gather::new(batch_a, &batch);
        let gb = Gather::new(batch_b, &batch);

        let (a, b) = (self.data(), other.data());
        let mut out = vec![T::zero(); nb * m * n];
        for bi in 0..nb {
            let ao = ga.index(bi) * m * k;
            let bo = gb.index(bi) * k * n;
            gemm(
                m,
                k,
                n,
                MatView::row_major(a, ao, k),
                MatView::row_major(b, bo, n),
                T::zero(),
                &mut out,
                bi * m * n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let (ad, bd) = (self.data_arc(), other.data_arc());
        let (na, nbd) = (self.numel(), other.numel());
        Ok(Tensor::from_op(out, shape, &[self, other], move |_, g, needs| {
            let grad_a = needs[0].then(|| {
                let mut gx = vec![T::zero(); na];
                for bi in 0..nb {
                    // dA = dC * B^T
                    gemm(
                        m,
                        n,
                        k,
                        MatView::row_major(g, bi * m * n, n),
                        MatView::transposed(&bd, gb.index(bi) * k * n, n),
                        T::one(),
                        &mut gx,
                        ga.index(bi) * m * k,
                    );
                }
                gx
            });
            let grad_b = needs[1].then(|| {
                let mut gx = vec![T::zero(); nbd];
                for bi in 0..nb {
                    // dB = A^T * dC
                    gemm(
                        k,
                        m,
                        n,
                        MatView::transposed(&ad, ga.index(bi) * m * k, k),
                        MatView::row_major(g, bi * m * n, n),
                        T::one(),
                        &mut gx,
                        gb.index(bi) * k * n,
                    );
                }
                gx
            });
            vec![grad_a, grad_b]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn identity_and_row_selection() {
        let a = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let eye = Tensor::from_f64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let r = Tensor::<f64>::from_f64(&[1.0, 0.0], &[1, 2]).unwrap();
        let c = Tensor::from_f64(&[2.0, 5.0], &[2, 1]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().to_vec(), vec![2.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ta = Tensor::<f64>::from_f64(&a, &[4, 5]).unwrap();
        let tb = Tensor::from_f64(&b, &[5, 3]).unwrap();
        let c = ta.matmul(&tb).unwrap();
        assert_eq!(c.shape(), &[4, 3]);
        for (x, y) in c.to_vec().iter().zip(naive(&a, &b, 4, 5, 3)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_batch_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ta = Tensor::<f64>::from_f64(&a, &[2, 3, 4]).unwrap().requires_grad();
        let tb = Tensor::from_f64(&b, &[4, 2]).unwrap().requires_grad();
        let c = ta.matmul(&tb).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        for bi in 0..2 {
            let expect = naive(&a[bi * 12..(bi + 1) * 12], &b, 3, 4, 2);
            for (x, y) in c.data()[bi * 6..(bi + 1) * 6].iter().zip(expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        c.sum().backward().unwrap();
        // d(sum)/dB[p][j] = sum over batches and rows of A[.., i, p]
        let gb = tb.grad().unwrap();
        for p in 0..4 {
            let col: f64 = (0..6).map(|r| a[r * 4 + p]).sum();
            assert!((gb[p * 2] - col).abs() < 1e-12 && (gb[p * 2 + 1] - col).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }
}

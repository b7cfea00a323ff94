use crate::model::ParamStore;
use crate::tensor::Float;

use super::{Result, TrainError};

/// What to do with a parameter that received no gradient this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingGrad {
    Error,
    /// Leave the parameter and its moments untouched.
    Skip,
}

/// Bias-corrected Adam with per-parameter step counts.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: Vec<u64>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Float>(store: &ParamStore<T>, lr: f64) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, t)| t.numel()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: vec![0; sizes.len()],
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step<T: Float>(&mut self, store: &mut ParamStore<T>, missing: MissingGrad) -> Result<()> {
        let ids: Vec<_> = (0..store.len()).collect();
        let grads: Vec<Option<Vec<T>>> = store.iter().map(|(_, t)| t.grad()).collect();
        if missing == MissingGrad::Error {
            if let Some(i) = grads.iter().position(Option::is_none) {
                return Err(TrainError::MissingGrad(store.names()[i].clone()));
            }
        }
        for (i, grad) in ids.into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let id = crate::model::ParamId(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = store.get_mut(id).data_mut();
            for k in 0..data.len() {
                let g = grad[k].f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                data[k] = T::of(data[k].f64() - update);
            }
        }
        Ok(())
    }
}

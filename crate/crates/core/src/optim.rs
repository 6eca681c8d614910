//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use brainmt_tensor::Tensor;

use crate::error::{BrainError, Result};
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Linear warmup from 0 to `base` over `warmup` steps, then half-cosine
/// decay to 0 at `total`. Steps past the end are clamped.
pub fn lr_schedule(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: usize,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamW {
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update with learning rate `lr`:
    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(BrainError::Shape(format!(
                "optimizer holds {} moments for {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            if g.len() != p.numel() {
                return Err(BrainError::Shape(format!("gradient {i} has {} elements, parameter has {}", g.len(), p.numel())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w = *w * decay - lr * mh / (vh.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

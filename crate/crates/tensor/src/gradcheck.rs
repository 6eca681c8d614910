//! Finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Settings for a central-difference gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation size.
    pub step: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// When set, at most this many coordinates per input are probed, evenly spread.
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            floor: 1e-7,
            max_coords: None,
        }
    }
}

/// Outcome of a check for one input tensor.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub coords: usize,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)` using Euclidean norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

fn sample_coords(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m + (n / m) / 2).map(|i| i.min(n - 1)).collect(),
        _ => (0..n).collect(),
    }
}

impl GradCheck {
    /// Compares reverse-mode gradients of the scalar `f(inputs)` with central
    /// differences, returning one report per input.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<Vec<InputReport>>
    where
        F: Fn(&Graph, &[Var]) -> Result<Var>,
    {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &vars)?;
        g.backward(&loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .map(|v| g.grad(v).ok_or_else(|| TensorError::Backward("missing leaf".into())))
            .collect::<Result<_>>()?;
        drop(vars);
        drop(g);

        let eval = |values: &[Tensor]| -> Result<f64> {
            let g = Graph::inference();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            f(&g, &vars)?.value().item()
        };

        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut reports = Vec::with_capacity(inputs.len());
        for idx in 0..inputs.len() {
            let coords = sample_coords(inputs[idx].numel(), self.max_coords);
            let mut numeric = Vec::with_capacity(coords.len());
            let mut picked = Vec::with_capacity(coords.len());
            for &c in &coords {
                let orig = work[idx].data()[c];
                work[idx].data_mut()[c] = orig + self.step;
                let up = eval(&work)?;
                work[idx].data_mut()[c] = orig - self.step;
                let down = eval(&work)?;
                work[idx].data_mut()[c] = orig;
                numeric.push((up - down) / (2.0 * self.step));
                picked.push(analytic[idx].data()[c]);
            }
            reports.push(InputReport {
                index: idx,
                coords: coords.len(),
                relative_error: relative_error(&picked, &numeric, self.floor),
                analytic_norm: picked.iter().map(|v| v * v).sum::<f64>().sqrt(),
            });
        }
        Ok(reports)
    }

    /// Largest relative error over all inputs.
    pub fn max_error<F>(&self, inputs: &[Tensor], f: F) -> Result<f64>
    where
        F: Fn(&Graph, &[Var]) -> Result<Var>,
    {
        Ok(self
            .run(inputs, f)?
            .iter()
            .map(|r| r.relative_error)
            .fold(0.0, f64::max))
    }
}

/// Reduces `y` to a scalar by a fixed pseudo-random projection, so every
/// output coordinate contributes a distinct weight.
pub fn project(g: &Graph, y: &Var, seed: u64) -> Result<Var> {
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    let weights = Tensor::from_fn(y.shape(), |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    });
    let w = g.constant(weights);
    let p = g.mul(y, &w)?;
    g.sum(&p)
}

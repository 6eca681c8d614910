//! Complexity benchmark: analytic activation counts and forward timings per T.

use std::path::Path;
use std::time::Instant;

use brainmt_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::MLP_RATIO;
use crate::config::ModelConfig;
use crate::error::{BrainError, Result};
use crate::mamba::MambaDims;
use crate::model::BrainMT;
use crate::params::ParamStore;
use crate::ssm::{GRAD_GROUP, SCAN_CHUNK};

pub const BENCH_HEADER: [&str; 7] = [
    "T",
    "tokens",
    "activation_elements",
    "parameters",
    "parameters_excl_pt",
    "forward_ms",
    "workspace_elements",
];

/// Timed forward passes per T (after one untimed pass); the median is reported.
pub const TIMING_RUNS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub t: usize,
    pub tokens: usize,
    /// Elements retained for backward by the Mamba and transformer stack.
    pub activation_elements: usize,
    pub parameters: usize,
    pub parameters_excl_pt: usize,
    pub forward_ms: f64,
    pub workspace_elements: usize,
}

/// Recorded elements of one scan direction over `len` tokens.
pub fn direction_elements(len: usize, dims: MambaDims) -> usize {
    let (z, d, n, r) = (dims.model, dims.inner, dims.state, dims.dt_rank);
    // in_proj 2d, two slices 2d, conv + silu, dt matmul + bias + softplus,
    // scan, gate silu + product: 12d per token
    len * (12 * d + 2 * (r + 2 * n) + z) + 2 * d * n
}

/// Recorded elements of a bidirectional Mamba block.
pub fn mamba_block_elements(len: usize, dims: MambaDims) -> usize {
    // norm, reorder, flip, unflip, sum, reorder back, residual
    7 * len * dims.model + 2 * direction_elements(len, dims)
}

/// Recorded elements of a transformer block.
pub fn transformer_block_elements(len: usize, dim: usize) -> usize {
    // two norms, q/k/v/out with bias, attention, two residuals, MLP with bias and GELU
    len * dim * (15 + 3 * MLP_RATIO)
}

pub fn stack_elements(cfg: &ModelConfig, len: usize) -> usize {
    cfg.mamba_layers * mamba_block_elements(len, cfg.mamba_dims())
        + cfg.transformer_layers * transformer_block_elements(len, cfg.token_dim())
}

/// Largest transient buffer of the stack outside the recorded activations:
/// the scan backward (per-group state history and B/C partials, plus
/// per-channel gradients) or the forward chunk summaries, or the attention
/// log-normalizers.
pub fn workspace_elements(cfg: &ModelConfig, len: usize) -> usize {
    let dims = cfg.mamba_dims();
    let (d, n) = (dims.inner, dims.state);
    let scan_fwd = 3 * d * len.div_ceil(SCAN_CHUNK) * n + len * d;
    let scan_bwd = d.div_ceil(GRAD_GROUP) * 3 * len * n + d * (2 * len + n);
    let attn = if cfg.transformer_layers > 0 { cfg.heads * len } else { 0 };
    scan_fwd.max(scan_bwd).max(attn)
}

fn random_input(cfg: &ModelConfig, seed: u64) -> Result<Tensor> {
    let [h, w, d] = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.frames * h * w * d;
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::new(&[cfg.frames, 1, h, w, d], data)?)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// One row per distinct T, sorted. Needs at least two values.
pub fn run_bench(cfg: &ModelConfig, ts: &[usize]) -> Result<Vec<BenchRow>> {
    let mut ts = ts.to_vec();
    ts.sort_unstable();
    ts.dedup();
    if ts.len() < 2 {
        return Err(BrainError::Usage("bench needs at least two distinct values of T".into()));
    }
    let mut setups = Vec::with_capacity(ts.len());
    for &t in &ts {
        let mut c = cfg.clone();
        c.frames = t;
        let (model, params) = BrainMT::new(&c)?;
        let x = random_input(&c, c.seed)?;
        setups.push((c, model, params, x));
    }
    let forward = |(_, model, params, x): &(ModelConfig, BrainMT, ParamStore, Tensor)| -> Result<f64> {
        let g = Graph::inference();
        let p = params.bind_constant(&g);
        let xv = g.constant(x.clone());
        let start = Instant::now();
        model.forward(&g, &p, &xv)?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    // one untimed pass each, then interleave so slow drifts in machine load hit every T alike
    for s in &setups {
        forward(s)?;
    }
    let mut times = vec![Vec::with_capacity(TIMING_RUNS); setups.len()];
    for _ in 0..TIMING_RUNS {
        for (s, ts) in setups.iter().zip(&mut times) {
            ts.push(forward(s)?);
        }
    }
    let mut rows = Vec::new();
    for ((c, model, params, _), times) in setups.iter().zip(times) {
        let len = c.frames * c.tokens_per_frame() + 1;
        let pt = params.get(model.positional.temporal).numel();
        rows.push(BenchRow {
            t: c.frames,
            tokens: len,
            activation_elements: stack_elements(c, len),
            parameters: params.numel(),
            parameters_excl_pt: params.numel() - pt,
            forward_ms: median(times),
            workspace_elements: workspace_elements(c, len),
        });
    }
    Ok(rows)
}

pub fn write_bench(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let io = |e: csv::Error| BrainError::parse(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(BENCH_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.tokens.to_string(),
            r.activation_elements.to_string(),
            r.parameters.to_string(),
            r.parameters_excl_pt.to_string(),
            format!("{:.3}", r.forward_ms),
            r.workspace_elements.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| BrainError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn single_t_is_rejected() {
        let err = run_bench(&ModelConfig::desk(), &[16, 16]).unwrap_err();
        assert!(matches!(err, BrainError::Usage(_)));
    }
}

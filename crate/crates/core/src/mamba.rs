//! Bidirectional selective-state-space block over the token sequence.

use brainmt_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ScanOrder;
use crate::encoder::NormParams;
use crate::error::{BrainError, Result};
use crate::params::{inverse_softplus, uniform_fan_in, Bound, ParamId, ParamStore};
use crate::ssm::{reorder_index, selective_scan};

/// Range of the initial step size `softplus(dt_bias)`, sampled log-uniformly.
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

/// Sizes shared by both scan directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    /// Token width Z.
    pub model: usize,
    /// Inner width `expansion * Z`.
    pub inner: usize,
    /// State size N.
    pub state: usize,
    /// Rank of the step-size projection.
    pub dt_rank: usize,
    /// Causal conv width.
    pub conv: usize,
}

/// Parameters of one scan direction.
#[derive(Clone, Debug)]
pub struct Direction {
    /// `[Z, 2 d_inner]`, producing x and the gate z.
    pub in_proj: ParamId,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    /// `[d_inner, r + 2N]`, producing the step input, B and C.
    pub x_proj: ParamId,
    pub dt_weight: ParamId,
    pub dt_bias: ParamId,
    /// `ln(-A)` per channel and state.
    pub a_log: ParamId,
    pub out_proj: ParamId,
}

impl Direction {
    pub fn new(store: &mut ParamStore, name: &str, dims: MambaDims, rng: &mut ChaCha8Rng) -> Self {
        let MambaDims {
            model: z,
            inner: d,
            state: n,
            dt_rank: r,
            conv: k,
        } = dims;
        let in_proj = store.add(format!("{name}.in_proj"), uniform_fan_in(&[z, 2 * d], z, rng));
        let conv_weight = store.add(format!("{name}.conv.weight"), uniform_fan_in(&[d, k], k, rng));
        let conv_bias = store.add(format!("{name}.conv.bias"), uniform_fan_in(&[d], k, rng));
        let x_proj = store.add(format!("{name}.x_proj"), uniform_fan_in(&[d, r + 2 * n], d, rng));
        let dt_weight = store.add(format!("{name}.dt.weight"), uniform_fan_in(&[r, d], r, rng));
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        let dt_bias = store.add(
            format!("{name}.dt.bias"),
            Tensor::from_fn(&[d], |_| inverse_softplus(rng.gen_range(lo..hi).exp())),
        );
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_fn(&[d, n], |i| ((i % n + 1) as f64).ln()),
        );
        let out_proj = store.add(format!("{name}.out_proj"), uniform_fan_in(&[d, z], d, rng));
        Direction {
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_weight,
            dt_bias,
            a_log,
            out_proj,
        }
    }

    /// `[L, Z] -> [L, Z]` for one scan direction, projected back to token width.
    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var, dims: MambaDims) -> Result<Var> {
        let (d, n, r) = (dims.inner, dims.state, dims.dt_rank);
        let xz = g.linear(x, p.get(self.in_proj), None)?;
        let xs = g.slice(&xz, 1, 0, d)?;
        let gate = g.slice(&xz, 1, d, 2 * d)?;
        let u = g.conv1d_causal(&xs, p.get(self.conv_weight), p.get(self.conv_bias))?;
        let u = g.silu(&u)?;
        let proj = g.linear(&u, p.get(self.x_proj), None)?;
        let dt_in = g.slice(&proj, 1, 0, r)?;
        let b = g.slice(&proj, 1, r, r + n)?;
        let c = g.slice(&proj, 1, r + n, r + 2 * n)?;
        let delta = g.linear(&dt_in, p.get(self.dt_weight), Some(p.get(self.dt_bias)))?;
        let delta = g.softplus(&delta)?;
        let a = g.exp(p.get(self.a_log))?;
        let a = g.scale(&a, -1.0)?;
        let y = selective_scan(g, &u, &delta, &a, &b, &c)?;
        let gate = g.silu(&gate)?;
        let y = g.mul(&y, &gate)?;
        Ok(g.linear(&y, p.get(self.out_proj), None)?)
    }
}

/// Pre-norm bidirectional block: `x + fwd(LN x) + flip(bwd(flip(LN x)))`,
/// evaluated in the configured scan order with cls first in both directions.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub norm: NormParams,
    pub fwd: Direction,
    pub bwd: Direction,
    pub dims: MambaDims,
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, dims: MambaDims, rng: &mut ChaCha8Rng) -> Self {
        MambaBlock {
            norm: NormParams::new(store, &format!("{name}.norm"), dims.model),
            fwd: Direction::new(store, &format!("{name}.fwd"), dims, rng),
            bwd: Direction::new(store, &format!("{name}.bwd"), dims, rng),
            dims,
        }
    }

    /// Makes the backward direction reuse the forward direction's parameters.
    pub fn tie_directions(&mut self) {
        self.bwd = self.fwd.clone();
    }

    /// `seq` is `[1 + T K, Z]` in canonical (cls, then frame-major) layout;
    /// the result has the same layout.
    pub fn forward(&self, g: &Graph, p: &Bound, seq: &Var, frames: usize, cells: usize, order: ScanOrder) -> Result<Var> {
        let s = seq.shape();
        if s.len() != 2 || s[0] != frames * cells + 1 || s[1] != self.dims.model {
            return Err(BrainError::Shape(format!(
                "mamba block expects [{} , {}], got {s:?}",
                frames * cells + 1,
                self.dims.model
            )));
        }
        let len = s[0];
        let to_scan = sequence_index(frames, cells, ScanOrder::SpatialFirst, order);
        let from_scan = sequence_index(frames, cells, order, ScanOrder::SpatialFirst);
        let flip: Vec<usize> = std::iter::once(0).chain((1..len).rev()).collect();

        let xn = self.norm.forward(g, p, seq, -1)?;
        let xn = g.gather(&xn, 0, &to_scan)?;
        let yf = self.fwd.forward(g, p, &xn, self.dims)?;
        let xb = g.gather(&xn, 0, &flip)?;
        let yb = self.bwd.forward(g, p, &xb, self.dims)?;
        let yb = g.gather(&yb, 0, &flip)?;
        let y = g.add(&yf, &yb)?;
        let y = g.gather(&y, 0, &from_scan)?;
        Ok(g.add(seq, &y)?)
    }
}

/// Reorder index over a whole sequence, keeping cls at position 0.
pub fn sequence_index(frames: usize, cells: usize, from: ScanOrder, to: ScanOrder) -> Vec<usize> {
    std::iter::once(0)
        .chain(reorder_index(frames, cells, from, to).into_iter().map(|i| i + 1))
        .collect()
}

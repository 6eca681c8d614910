//! Positional embeddings, the classification token and sequence flattening.

use brainmt_tensor::{Graph, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{BrainError, Result};
use crate::params::{truncated_normal, Bound, ParamId, ParamStore};

pub const POSITIONAL_STD: f64 = 0.02;

/// Learned spatial `P_s [1, K, Z]`, temporal `P_t [T, 1, Z]` and cls `[1, Z]` tensors.
#[derive(Clone, Debug)]
pub struct PositionalParams {
    pub spatial: ParamId,
    pub temporal: ParamId,
    pub cls: ParamId,
    pub frames: usize,
    pub cells: usize,
    pub dim: usize,
}

impl PositionalParams {
    pub fn new(store: &mut ParamStore, frames: usize, cells: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        PositionalParams {
            spatial: store.add("pos.spatial", truncated_normal(&[1, cells, dim], POSITIONAL_STD, rng)),
            temporal: store.add("pos.temporal", truncated_normal(&[frames, 1, dim], POSITIONAL_STD, rng)),
            cls: store.add("pos.cls", truncated_normal(&[1, dim], POSITIONAL_STD, rng)),
            frames,
            cells,
            dim,
        }
    }

    /// Turns stage-2 features `[T, Z, h, w, d]` into the token sequence
    /// `[T K + 1, Z]`: body token `t K + k` is `feature(t, k) + P_s[k] + P_t[t]`,
    /// and the cls token, without positional terms, is prepended at index 0.
    pub fn forward(&self, g: &Graph, p: &Bound, features: &Var) -> Result<Var> {
        let s = features.shape();
        if s.len() != 5 {
            return Err(BrainError::Shape(format!(
                "expected stage-2 features [T, Z, h, w, d], got {s:?}"
            )));
        }
        let (t, z) = (s[0], s[1]);
        let k: usize = s[2..].iter().product();
        if t != self.frames || k != self.cells || z != self.dim {
            return Err(BrainError::Shape(format!(
                "features have T={t}, K={k}, Z={z} but positional embeddings expect T={}, K={}, Z={}",
                self.frames, self.cells, self.dim
            )));
        }
        let x = g.reshape(features, &[t, z, k])?;
        let x = g.permute(&x, &[0, 2, 1])?;
        let x = g.add(&x, p.get(self.spatial))?;
        let x = g.add(&x, p.get(self.temporal))?;
        let body = g.reshape(&x, &[t * k, z])?;
        Ok(g.concat(&[p.get(self.cls), &body], 0)?)
    }
}

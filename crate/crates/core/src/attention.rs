//! Multi-head self-attention and the pre-norm transformer block.
//!
//! Attention is evaluated row by row with a running log-sum-exp, so neither
//! the forward pass nor the adjoint materializes an `L x L` matrix. Only the
//! per-row log-normalizers are kept for the backward pass.

use std::rc::Rc;

use brainmt_tensor::{Backward, Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::NormParams;
use crate::error::{BrainError, Result};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamStore};

pub const MLP_RATIO: usize = 4;

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize)> {
    let s = q.shape();
    if s.len() != 2 || k.shape() != s || v.shape() != s {
        return Err(BrainError::Shape(format!(
            "attention expects q, k, v of equal shape [L, Z]; got {:?}, {:?}, {:?}",
            s,
            k.shape(),
            v.shape()
        )));
    }
    if s[0] == 0 {
        return Err(BrainError::Shape("attention over an empty sequence".into()));
    }
    if heads == 0 || s[1] % heads != 0 {
        return Err(BrainError::Config(format!(
            "token width {} is not divisible by {heads} heads",
            s[1]
        )));
    }
    Ok((s[0], s[1]))
}

/// Scores of row `i` against every key for one head, written into `row`.
fn head_scores(q: &[f64], k: &[f64], z: usize, off: usize, dh: usize, i: usize, row: &mut [f64]) {
    let scale = 1.0 / (dh as f64).sqrt();
    let qi = &q[i * z + off..i * z + off + dh];
    for (j, s) in row.iter_mut().enumerate() {
        let kj = &k[j * z + off..j * z + off + dh];
        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
    }
}

/// Turns scores into probabilities in place and returns the log-normalizer.
fn normalize_row(row: &mut [f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in row.iter_mut() {
        *s = (*s - m).exp();
        z += *s;
    }
    for s in row.iter_mut() {
        *s /= z;
    }
    m + z.ln()
}

/// Per-head outputs `[L, dh]` and log-normalizers `[L]`.
fn head_forward(q: &[f64], k: &[f64], v: &[f64], l: usize, z: usize, off: usize, dh: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; l * dh];
    let mut lse = vec![0.0; l];
    let mut row = vec![0.0; l];
    for i in 0..l {
        head_scores(q, k, z, off, dh, i, &mut row);
        lse[i] = normalize_row(&mut row);
        let oi = &mut out[i * dh..(i + 1) * dh];
        for (j, &pj) in row.iter().enumerate() {
            let vj = &v[j * z + off..j * z + off + dh];
            for (o, vv) in oi.iter_mut().zip(vj) {
                *o += pj * vv;
            }
        }
    }
    (out, lse)
}

/// Attention probabilities `[h, L, L]`; meant for inspection on short sequences.
pub fn attention_probabilities(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let (l, z) = check_qkv(q, k, k, heads)?;
    let dh = z / heads;
    let mut out = Vec::with_capacity(heads * l * l);
    let mut row = vec![0.0; l];
    for h in 0..heads {
        for i in 0..l {
            head_scores(q.data(), k.data(), z, h * dh, dh, i, &mut row);
            normalize_row(&mut row);
            out.extend_from_slice(&row);
        }
    }
    Ok(Tensor::new(&[heads, l, l], out)?)
}

struct AttentionOp {
    q: Rc<Tensor>,
    k: Rc<Tensor>,
    v: Rc<Tensor>,
    out: Rc<Tensor>,
    lse: Vec<Vec<f64>>,
    heads: usize,
}

impl Backward for AttentionOp {
    fn name(&self) -> &'static str {
        "multi_head_attention"
    }

    fn backward(&self, go: &Tensor, needs: &[bool]) -> brainmt_tensor::Result<Vec<Option<Tensor>>> {
        let (l, z) = (self.q.shape()[0], self.q.shape()[1]);
        let dh = z / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, k, v, o, gd) = (self.q.data(), self.k.data(), self.v.data(), self.out.data(), go.data());
        let lse_all = &self.lse;
        let per_head: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..self.heads)
            .into_par_iter()
            .map(|h| {
                let off = h * dh;
                let mut dq = vec![0.0; l * dh];
                let mut dk = vec![0.0; l * dh];
                let mut dv = vec![0.0; l * dh];
                let mut row = vec![0.0; l];
                for i in 0..l {
                    head_scores(q, k, z, off, dh, i, &mut row);
                    let lse = lse_all[h][i];
                    let gi = &gd[i * z + off..i * z + off + dh];
                    let oi = &o[i * z + off..i * z + off + dh];
                    let di: f64 = gi.iter().zip(oi).map(|(a, b)| a * b).sum();
                    let qi = &q[i * z + off..i * z + off + dh];
                    for j in 0..l {
                        let pij = (row[j] - lse).exp();
                        let vj = &v[j * z + off..j * z + off + dh];
                        let dpij: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let ds = pij * (dpij - di) * scale;
                        let kj = &k[j * z + off..j * z + off + dh];
                        for c in 0..dh {
                            dq[i * dh + c] += ds * kj[c];
                            dk[j * dh + c] += ds * qi[c];
                            dv[j * dh + c] += pij * gi[c];
                        }
                    }
                }
                (dq, dk, dv)
            })
            .collect();
        let mut grads = [vec![0.0; l * z], vec![0.0; l * z], vec![0.0; l * z]];
        for (h, parts) in per_head.into_iter().enumerate() {
            for (dst, src) in grads.iter_mut().zip([parts.0, parts.1, parts.2]) {
                for i in 0..l {
                    dst[i * z + h * dh..i * z + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
                }
            }
        }
        let [dq, dk, dv] = grads;
        Ok(vec![
            needs[0].then(|| Tensor::new(&[l, z], dq)).transpose()?,
            needs[1].then(|| Tensor::new(&[l, z], dk)).transpose()?,
            needs[2].then(|| Tensor::new(&[l, z], dv)).transpose()?,
        ])
    }
}

/// `softmax(Q K^T / sqrt(dh)) V` per head on column blocks of `[L, Z]`
/// inputs, heads concatenated along the columns.
pub fn multi_head_attention(g: &Graph, q: &Var, k: &Var, v: &Var, heads: usize) -> Result<Var> {
    let (l, z) = check_qkv(q.value(), k.value(), v.value(), heads)?;
    let dh = z / heads;
    let (qd, kd, vd) = (q.value().data(), k.value().data(), v.value().data());
    let per_head: Vec<(Vec<f64>, Vec<f64>)> = (0..heads)
        .into_par_iter()
        .map(|h| head_forward(qd, kd, vd, l, z, h * dh, dh))
        .collect();
    let mut out = vec![0.0; l * z];
    let mut lse = Vec::with_capacity(heads);
    for (h, (o, s)) in per_head.into_iter().enumerate() {
        for i in 0..l {
            out[i * z + h * dh..i * z + (h + 1) * dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
        }
        lse.push(s);
    }
    let out = Tensor::new(&[l, z], out)?;
    let op = AttentionOp {
        q: q.shared(),
        k: k.shared(),
        v: v.shared(),
        out: Rc::new(out.clone()),
        lse,
        heads,
    };
    Ok(g.apply(op, &[q, k, v], out)?)
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            weight: store.add(format!("{name}.weight"), uniform_fan_in(&[n_in, n_out], n_in, rng)),
            bias: store.add(format!("{name}.bias"), uniform_fan_in(&[n_out], n_in, rng)),
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        Ok(g.linear(x, p.get(self.weight), Some(p.get(self.bias)))?)
    }
}

/// `x + MHA(LN x)` followed by `x + MLP(LN x)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: NormParams,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub norm2: NormParams,
    pub mlp1: Dense,
    pub mlp2: Dense,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(BrainError::Config(format!(
                "token width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(TransformerBlock {
            norm1: NormParams::new(store, &format!("{name}.norm1"), dim),
            q: Dense::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Dense::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Dense::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Dense::new(store, &format!("{name}.out"), dim, dim, rng),
            norm2: NormParams::new(store, &format!("{name}.norm2"), dim),
            mlp1: Dense::new(store, &format!("{name}.mlp1"), dim, MLP_RATIO * dim, rng),
            mlp2: Dense::new(store, &format!("{name}.mlp2"), MLP_RATIO * dim, dim, rng),
            heads,
        })
    }

    pub fn attention(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let a = multi_head_attention(g, &q, &k, &v, self.heads)?;
        self.out.forward(g, p, &a)
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x, -1)?;
        let h = self.attention(g, p, &h)?;
        let x = g.add(x, &h)?;
        let h = self.norm2.forward(g, p, &x, -1)?;
        let h = self.mlp1.forward(g, p, &h)?;
        let h = g.gelu(&h)?;
        let h = self.mlp2.forward(g, p, &h)?;
        Ok(g.add(&x, &h)?)
    }
}

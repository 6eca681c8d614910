//! Zero-order-hold discretization, the selective scan kernel and scan ordering.

use std::rc::Rc;

use brainmt_tensor::{Backward, Graph, Tensor, Var};
use rayon::prelude::*;

use crate::config::ScanOrder;
use crate::error::{BrainError, Result};

/// Below this `|delta * a|` the input matrix uses its first-order limit `delta * b`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Timesteps per chunk of the two-pass scan.
pub const SCAN_CHUNK: usize = 32;

/// Channels per reduction group in the scan adjoint.
pub const GRAD_GROUP: usize = 8;

/// Discretizes one diagonal entry: returns `(exp(delta a), (exp(delta a) - 1) / a * b)`.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let x = delta * a;
    let a_bar = x.exp();
    let b_bar = if x.abs() < ZOH_LIMIT {
        delta * b
    } else {
        x.exp_m1() / a * b
    };
    (a_bar, b_bar)
}

/// Elementwise [`zoh_discretize`] over a diagonal `A` and vector `B`.
pub fn zoh_discretize_diag(a: &[f64], b: &[f64], delta: f64) -> (Vec<f64>, Vec<f64>) {
    a.iter().zip(b).map(|(&an, &bn)| zoh_discretize(an, bn, delta)).unzip()
}

/// Derivative of `expm1(x) / x`.
fn phi_prime(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x * (1.0 / 30.0 + x / 144.0)))
    } else {
        (x * x.exp() - x.exp_m1()) / (x * x)
    }
}

/// Shapes of one scan problem.
#[derive(Clone, Copy, Debug)]
struct Dims {
    l: usize,
    d: usize,
    n: usize,
}

fn check_shapes(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Dims> {
    let us = u.shape();
    if us.len() != 2 {
        return Err(BrainError::Shape(format!("scan input must be [L, d], got {us:?}")));
    }
    let (l, d) = (us[0], us[1]);
    let n = a.shape().get(1).copied().unwrap_or(0);
    let ok = delta.shape() == [l, d]
        && a.shape() == [d, n]
        && b.shape() == [l, n]
        && c.shape() == [l, n]
        && n > 0;
    if !ok {
        return Err(BrainError::Shape(format!(
            "selective scan expects u, delta [L,d], A [d,N], B, C [L,N]; got u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}",
            us,
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    Ok(Dims { l, d, n })
}

struct ScanInputs<'a> {
    u: &'a [f64],
    delta: &'a [f64],
    a: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    dims: Dims,
}

impl ScanInputs<'_> {
    /// Discretized transition and input terms at `(t, channel, state)`.
    #[inline]
    fn step(&self, t: usize, ch: usize, s: usize) -> (f64, f64) {
        let Dims { d, n, .. } = self.dims;
        let dt = self.delta[t * d + ch];
        let (a_bar, b_bar) = zoh_discretize(self.a[ch * n + s], self.b[t * n + s], dt);
        (a_bar, b_bar * self.u[t * d + ch])
    }
}

/// Chunked two-pass evaluation of `h_t = a_t h_{t-1} + b_t`, `y_t = C_t . h_t`.
///
/// Pass one composes each chunk with the associative operator
/// `(a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2)` from a zero state. A short
/// sequential carry then yields every chunk's true initial state, and pass
/// two replays each chunk from it. Both passes are parallel over
/// (channel, chunk) pairs.
fn scan_forward(x: &ScanInputs) -> Result<Vec<f64>> {
    let Dims { l, d, n } = x.dims;
    let chunks = l.div_ceil(SCAN_CHUNK);
    let items: Vec<(usize, usize)> = (0..d).flat_map(|ch| (0..chunks).map(move |j| (ch, j))).collect();

    let summaries: Vec<(Vec<f64>, Vec<f64>)> = items
        .par_iter()
        .map(|&(ch, j)| {
            let mut prod = vec![1.0; n];
            let mut state = vec![0.0; n];
            for t in j * SCAN_CHUNK..((j + 1) * SCAN_CHUNK).min(l) {
                for s in 0..n {
                    let (a_bar, bu) = x.step(t, ch, s);
                    prod[s] *= a_bar;
                    state[s] = a_bar * state[s] + bu;
                }
            }
            (prod, state)
        })
        .collect();

    let mut starts = vec![vec![0.0; n]; items.len()];
    for ch in 0..d {
        for j in 1..chunks {
            let (prod, state) = &summaries[ch * chunks + j - 1];
            let prev = starts[ch * chunks + j - 1].clone();
            let cur = &mut starts[ch * chunks + j];
            for s in 0..n {
                cur[s] = prod[s] * prev[s] + state[s];
            }
        }
    }

    let outputs: Vec<std::result::Result<Vec<f64>, (usize, usize)>> = items
        .par_iter()
        .zip(&starts)
        .map(|(&(ch, j), start)| {
            let mut h = start.clone();
            let lo = j * SCAN_CHUNK;
            let hi = ((j + 1) * SCAN_CHUNK).min(l);
            let mut y = Vec::with_capacity(hi - lo);
            for t in lo..hi {
                let mut acc = 0.0;
                for s in 0..n {
                    let (a_bar, bu) = x.step(t, ch, s);
                    h[s] = a_bar * h[s] + bu;
                    acc += x.c[t * n + s] * h[s];
                }
                if !acc.is_finite() || h.iter().any(|v| !v.is_finite()) {
                    return Err((t, ch));
                }
                y.push(acc);
            }
            Ok(y)
        })
        .collect();

    let mut y = vec![0.0; l * d];
    let mut first_bad: Option<(usize, usize)> = None;
    for ((ch, j), out) in items.iter().zip(outputs) {
        match out {
            Ok(vals) => {
                for (i, v) in vals.into_iter().enumerate() {
                    y[(j * SCAN_CHUNK + i) * d + ch] = v;
                }
            }
            Err(bad) => {
                if first_bad.map_or(true, |f| bad < f) {
                    first_bad = Some(bad);
                }
            }
        }
    }
    if let Some((t, ch)) = first_bad {
        return Err(BrainError::Numeric(format!(
            "selective scan state became non-finite at timestep {t} (channel {ch})"
        )));
    }
    Ok(y)
}

/// Evaluates the selective scan on plain tensors.
///
/// `u`, `delta`: `[L, d]`; `a`: `[d, N]` (diagonal of A per channel);
/// `b`, `c`: `[L, N]`. The state starts at zero.
pub fn selective_scan_values(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
    let dims = check_shapes(u, delta, a, b, c)?;
    let x = ScanInputs {
        u: u.data(),
        delta: delta.data(),
        a: a.data(),
        b: b.data(),
        c: c.data(),
        dims,
    };
    Ok(Tensor::new(&[dims.l, dims.d], scan_forward(&x)?)?)
}

struct SelectiveScanOp {
    inputs: [Rc<Tensor>; 5],
    dims: Dims,
}

struct ChannelGrads {
    du: Vec<f64>,
    ddelta: Vec<f64>,
    da: Vec<f64>,
}

impl Backward for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, gy: &Tensor, needs: &[bool]) -> brainmt_tensor::Result<Vec<Option<Tensor>>> {
        let Dims { l, d, n } = self.dims;
        let [u, delta, a, b, c] = &self.inputs;
        let x = ScanInputs {
            u: u.data(),
            delta: delta.data(),
            a: a.data(),
            b: b.data(),
            c: c.data(),
            dims: self.dims,
        };
        let gyd = gy.data();

        let groups: Vec<(Vec<ChannelGrads>, Vec<f64>, Vec<f64>)> = (0..d.div_ceil(GRAD_GROUP))
            .into_par_iter()
            .map(|grp| {
                let mut db = vec![0.0; l * n];
                let mut dc = vec![0.0; l * n];
                let mut per_channel = Vec::new();
                let mut hist = vec![0.0; l * n];
                for ch in grp * GRAD_GROUP..((grp + 1) * GRAD_GROUP).min(d) {
                    let mut h = vec![0.0; n];
                    for t in 0..l {
                        for s in 0..n {
                            let (a_bar, bu) = x.step(t, ch, s);
                            h[s] = a_bar * h[s] + bu;
                            hist[t * n + s] = h[s];
                        }
                    }
                    let mut g = ChannelGrads {
                        du: vec![0.0; l],
                        ddelta: vec![0.0; l],
                        da: vec![0.0; n],
                    };
                    let mut gh = vec![0.0; n];
                    for t in (0..l).rev() {
                        let go = gyd[t * d + ch];
                        let ut = x.u[t * d + ch];
                        let dt = x.delta[t * d + ch];
                        for s in 0..n {
                            gh[s] += go * x.c[t * n + s];
                            dc[t * n + s] += go * hist[t * n + s];
                            let an = x.a[ch * n + s];
                            let bn = x.b[t * n + s];
                            let z = dt * an;
                            let a_bar = z.exp();
                            let beta = if z.abs() < ZOH_LIMIT { dt } else { z.exp_m1() / an };
                            let h_prev = if t > 0 { hist[(t - 1) * n + s] } else { 0.0 };
                            let g_abar = gh[s] * h_prev;
                            let g_beta = gh[s] * bn * ut;
                            db[t * n + s] += gh[s] * beta * ut;
                            g.du[t] += gh[s] * beta * bn;
                            g.ddelta[t] += g_abar * a_bar * an + g_beta * a_bar;
                            g.da[s] += g_abar * a_bar * dt + g_beta * dt * dt * phi_prime(z);
                            gh[s] *= a_bar;
                        }
                    }
                    per_channel.push(g);
                }
                (per_channel, db, dc)
            })
            .collect();

        let mut du = vec![0.0; l * d];
        let mut ddelta = vec![0.0; l * d];
        let mut da = vec![0.0; d * n];
        let mut db = vec![0.0; l * n];
        let mut dc = vec![0.0; l * n];
        let mut ch = 0;
        for (per_channel, gdb, gdc) in groups {
            for g in per_channel {
                for t in 0..l {
                    du[t * d + ch] = g.du[t];
                    ddelta[t * d + ch] = g.ddelta[t];
                }
                da[ch * n..(ch + 1) * n].copy_from_slice(&g.da);
                ch += 1;
            }
            for (acc, v) in db.iter_mut().zip(&gdb) {
                *acc += v;
            }
            for (acc, v) in dc.iter_mut().zip(&gdc) {
                *acc += v;
            }
        }
        let wrap = |need: bool, shape: &[usize], data: Vec<f64>| -> brainmt_tensor::Result<Option<Tensor>> {
            need.then(|| Tensor::new(shape, data)).transpose()
        };
        Ok(vec![
            wrap(needs[0], &[l, d], du)?,
            wrap(needs[1], &[l, d], ddelta)?,
            wrap(needs[2], &[d, n], da)?,
            wrap(needs[3], &[l, n], db)?,
            wrap(needs[4], &[l, n], dc)?,
        ])
    }
}

/// Differentiable selective scan; see [`selective_scan_values`] for shapes.
pub fn selective_scan(g: &Graph, u: &Var, delta: &Var, a: &Var, b: &Var, c: &Var) -> Result<Var> {
    let dims = check_shapes(u.value(), delta.value(), a.value(), b.value(), c.value())?;
    let y = selective_scan_values(u.value(), delta.value(), a.value(), b.value(), c.value())?;
    let op = SelectiveScanOp {
        inputs: [u.shared(), delta.shared(), a.shared(), b.shared(), c.shared()],
        dims,
    };
    Ok(g.apply(op, &[u, delta, a, b, c], y)?)
}

/// Position of token `(t, k)` in a body laid out in `order`.
pub fn scan_position(order: ScanOrder, t: usize, k: usize, frames: usize, cells: usize) -> usize {
    match order {
        ScanOrder::TemporalFirst => k * frames + t,
        ScanOrder::SpatialFirst => t * cells + k,
    }
}

/// Gather index converting a body in layout `from` to layout `to`:
/// `out[i] = in[index[i]]`.
pub fn reorder_index(frames: usize, cells: usize, from: ScanOrder, to: ScanOrder) -> Vec<usize> {
    let mut index = vec![0; frames * cells];
    for t in 0..frames {
        for k in 0..cells {
            index[scan_position(to, t, k, frames, cells)] = scan_position(from, t, k, frames, cells);
        }
    }
    index
}

/// Reorders the rows of a `[T K, Z]` token body between layouts.
pub fn reorder(body: &Tensor, frames: usize, cells: usize, from: ScanOrder, to: ScanOrder) -> Result<Tensor> {
    let s = body.shape();
    if s.len() != 2 || s[0] != frames * cells {
        return Err(BrainError::Shape(format!(
            "body of shape {s:?} does not hold T*K = {frames}*{cells} tokens"
        )));
    }
    let z = s[1];
    let index = reorder_index(frames, cells, from, to);
    let mut out = Vec::with_capacity(body.numel());
    for &i in &index {
        out.extend_from_slice(&body.data()[i * z..(i + 1) * z]);
    }
    Ok(Tensor::new(s, out)?)
}

use std::ops::Range;
use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::graph::{Backward, Graph, Var};
use crate::ops::linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::tensor::Tensor;

/// Geometry of a cubic-kernel 3-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Conv3dSpec {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent for an input extent, or `None` if the kernel does not fit.
    pub fn out_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.kernel == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    ci: usize,
    co: usize,
    input: [usize; 3],
    output: [usize; 3],
    spec: Conv3dSpec,
}

impl Geometry {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn kvol(&self) -> usize {
        self.spec.kernel.pow(3)
    }

    /// Output indices along dimension `d` whose tap `k` lands inside the input.
    fn valid(&self, d: usize, k: usize) -> Range<usize> {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let (i, o, k) = (self.input[d] as isize, self.output[d] as isize, k as isize);
        let lo = (p - k).max(0);
        let lo = (lo + s - 1) / s;
        let hi = (i - 1 + p - k).div_euclid(s) + 1;
        let hi = hi.min(o);
        if hi <= lo {
            0..0
        } else {
            lo as usize..hi as usize
        }
    }

    /// Visits every (output offset, input offset) pair for kernel tap `(ka, kb, kc)`.
    #[inline]
    fn for_tap(&self, ka: usize, kb: usize, kc: usize, mut f: impl FnMut(usize, usize)) {
        let s = self.spec.stride;
        let p = self.spec.padding;
        let [_, ib, ic] = self.input;
        let [_, ob, oc] = self.output;
        let (ra, rb, rc) = (self.valid(0, ka), self.valid(1, kb), self.valid(2, kc));
        for oa in ra {
            let ia = oa * s + ka - p;
            for obb in rb.clone() {
                let ibb = obb * s + kb - p;
                let orow = (oa * ob + obb) * oc;
                let irow = (ia * ib + ibb) * ic;
                for occ in rc.clone() {
                    f(orow + occ, irow + occ * s + kc - p);
                }
            }
        }
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let k = self.spec.kernel;
        (0..k).flat_map(move |a| {
            (0..k).flat_map(move |b| (0..k).map(move |c| ((a * k + b) * k + c, a, b, c)))
        })
    }
}

impl Geometry {
    /// Column matrix `[Ci k^3, out_vol]` of one sample; padding taps stay zero.
    fn im2col(&self, x: &[f64], col: &mut Vec<f64>) {
        let (iv, ov, kv) = (self.in_vol(), self.out_vol(), self.kvol());
        col.clear();
        col.resize(self.ci * kv * ov, 0.0);
        for ci in 0..self.ci {
            let xsl = &x[ci * iv..][..iv];
            for (t, ka, kb, kc) in self.taps() {
                let row = &mut col[(ci * kv + t) * ov..][..ov];
                self.for_tap(ka, kb, kc, |o, i| row[o] = xsl[i]);
            }
        }
    }

    /// Scatter-adds a column matrix back onto one sample's input layout.
    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let (iv, ov, kv) = (self.in_vol(), self.out_vol(), self.kvol());
        for ci in 0..self.ci {
            let dst = &mut dx[ci * iv..][..iv];
            for (t, ka, kb, kc) in self.taps() {
                let row = &col[(ci * kv + t) * ov..][..ov];
                self.for_tap(ka, kb, kc, |o, i| dst[i] += row[o]);
            }
        }
    }
}

struct Conv3dOp {
    geo: Geometry,
    x: Rc<Tensor>,
    w: Rc<Tensor>,
}

impl Backward for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let geo = self.geo;
        let (iv, ov, kv) = (geo.in_vol(), geo.out_vol(), geo.kvol());
        let rows = geo.ci * kv;
        let gd = g.data();
        let xd = self.x.data();
        let wd = self.w.data();

        let mut dx_all = needs[0].then(|| vec![0.0; geo.n * geo.ci * iv]);
        if let Some(dx) = dx_all.as_mut() {
            dx.par_chunks_mut(geo.ci * iv).enumerate().for_each_init(Vec::new, |dcol, (n, dst)| {
                dcol.clear();
                dcol.resize(rows * ov, 0.0);
                gemm_tn_acc(wd, &gd[n * geo.co * ov..][..geo.co * ov], dcol, geo.co, rows, ov);
                geo.col2im(dcol, dst);
            });
        }
        // per-sample partials, summed in sample order
        let dw_all = needs[1].then(|| {
            let parts: Vec<Vec<f64>> = (0..geo.n)
                .into_par_iter()
                .map_init(Vec::new, |col, n| {
                    geo.im2col(&xd[n * geo.ci * iv..][..geo.ci * iv], col);
                    let mut dw = vec![0.0; geo.co * rows];
                    gemm_nt_acc(&gd[n * geo.co * ov..][..geo.co * ov], col, &mut dw, geo.co, ov, rows);
                    dw
                })
                .collect();
            let mut all = vec![0.0; geo.co * rows];
            for dw in parts {
                for (a, v) in all.iter_mut().zip(&dw) {
                    *a += v;
                }
            }
            all
        });

        let db = needs[2].then(|| {
            let mut db = vec![0.0; geo.co];
            for n in 0..geo.n {
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc += gd[(n * geo.co + co) * ov..][..ov].iter().sum::<f64>();
                }
            }
            Tensor::new(&[geo.co], db)
        });

        Ok(vec![
            dx_all.map(|d| Tensor::new(self.x.shape(), d)).transpose()?,
            dw_all.map(|d| Tensor::new(self.w.shape(), d)).transpose()?,
            db.transpose()?,
        ])
    }
}

struct Conv1dCausalOp {
    x: Rc<Tensor>,
    w: Rc<Tensor>,
}

impl Backward for Conv1dCausalOp {
    fn name(&self) -> &'static str {
        "conv1d_causal"
    }

    fn backward(&self, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (l, d) = (self.x.shape()[0], self.x.shape()[1]);
        let k = self.w.shape()[1];
        let (xd, wd, gd) = (self.x.data(), self.w.data(), g.data());
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; l * d];
            for t in 0..l {
                for j in 0..k.min(l - t) {
                    for c in 0..d {
                        dx[t * d + c] += wd[c * k + j] * gd[(t + j) * d + c];
                    }
                }
            }
            Tensor::new(&[l, d], dx)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; d * k];
            for t in 0..l {
                for j in 0..k.min(t + 1) {
                    for c in 0..d {
                        dw[c * k + j] += gd[t * d + c] * xd[(t - j) * d + c];
                    }
                }
            }
            Tensor::new(&[d, k], dw)
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; d];
            for row in gd.chunks(d) {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            Tensor::new(&[d], db)
        });
        Ok(vec![dx.transpose()?, dw.transpose()?, db.transpose()?])
    }
}

impl Graph {
    /// 3-D cross-correlation of `x[N, Ci, H, W, D]` (or `[Ci, H, W, D]`) with
    /// `w[Co, Ci, k, k, k]` plus `bias[Co]`.
    pub fn conv3d(&self, x: &Var, w: &Var, bias: &Var, spec: Conv3dSpec) -> Result<Var> {
        let xs = x.shape();
        let ws = w.shape();
        let batched = match xs.len() {
            5 => true,
            4 => false,
            _ => {
                return Err(TensorError::shape(
                    "conv3d",
                    format!("input must be [N,C,H,W,D] or [C,H,W,D], got {xs:?}"),
                ))
            }
        };
        let (n, rest) = if batched { (xs[0], &xs[1..]) } else { (1, xs) };
        let k = spec.kernel;
        if ws.len() != 5 || ws[1] != rest[0] || ws[2..] != [k, k, k] {
            return Err(TensorError::shape(
                "conv3d",
                format!("weight {ws:?} incompatible with input {xs:?} and kernel {k}"),
            ));
        }
        if bias.shape() != [ws[0]] {
            return Err(TensorError::shape(
                "conv3d",
                format!("bias {:?} does not match {} output channels", bias.shape(), ws[0]),
            ));
        }
        let input = [rest[1], rest[2], rest[3]];
        let mut output = [0; 3];
        for d in 0..3 {
            output[d] = spec.out_len(input[d]).ok_or_else(|| {
                TensorError::shape(
                    "conv3d",
                    format!("kernel {k} stride {} padding {} does not fit input {xs:?}", spec.stride, spec.padding),
                )
            })?;
        }
        let geo = Geometry {
            n,
            ci: ws[1],
            co: ws[0],
            input,
            output,
            spec,
        };
        let (iv, ov, kv) = (geo.in_vol(), geo.out_vol(), geo.kvol());
        let xd = x.value().data();
        let wd = w.value().data();
        let bd = bias.value().data();
        let rows = geo.ci * kv;
        let mut out = vec![0.0; n * geo.co * ov];
        out.par_chunks_mut(geo.co * ov).enumerate().for_each_init(Vec::new, |col, (ni, dst)| {
            for (co, chunk) in dst.chunks_mut(ov).enumerate() {
                chunk.fill(bd[co]);
            }
            geo.im2col(&xd[ni * geo.ci * iv..][..geo.ci * iv], col);
            gemm_acc(wd, col, dst, geo.co, rows, ov);
        });
        let mut shape = Vec::with_capacity(5);
        if batched {
            shape.push(n);
        }
        shape.push(geo.co);
        shape.extend(output);
        let out = Tensor::new(&shape, out)?;
        self.apply(
            Conv3dOp {
                geo,
                x: x.shared(),
                w: w.shared(),
            },
            &[x, w, bias],
            out,
        )
    }

    /// Depthwise causal convolution along time:
    /// `y[t, c] = bias[c] + sum_j w[c, j] * x[t - j, c]` with `x` zero before `t = 0`.
    pub fn conv1d_causal(&self, x: &Var, w: &Var, bias: &Var) -> Result<Var> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || bias.shape() != [xs[1]] {
            return Err(TensorError::shape(
                "conv1d_causal",
                format!(
                    "expected x[L,d], w[d,k], bias[d]; got {xs:?}, {ws:?}, {:?}",
                    bias.shape()
                ),
            ));
        }
        let (l, d, k) = (xs[0], xs[1], ws[1]);
        if k == 0 {
            return Err(TensorError::shape("conv1d_causal", "kernel width must be at least 1"));
        }
        let (xd, wd, bd) = (x.value().data(), w.value().data(), bias.value().data());
        let mut out = Vec::with_capacity(l * d);
        for _ in 0..l {
            out.extend_from_slice(bd);
        }
        for t in 0..l {
            for j in 0..k.min(t + 1) {
                for c in 0..d {
                    out[t * d + c] += wd[c * k + j] * xd[(t - j) * d + c];
                }
            }
        }
        let out = Tensor::new(&[l, d], out)?;
        self.apply(
            Conv1dCausalOp {
                x: x.shared(),
                w: w.shared(),
            },
            &[x, w, bias],
            out,
        )
    }
}

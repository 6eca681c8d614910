use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::graph::{Backward, Graph, Var};
use crate::ops::elementwise::broadcast_shape;
use crate::tensor::Tensor;

/// `c[m,n] += a[m,k] * b[k,n]` on raw row-major slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `c[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Batch layout of a broadcast matmul: for each output batch index, the
/// matrix offsets (in units of whole matrices) into `a` and `b`.
struct BatchPlan {
    out_batch: Vec<usize>,
    a_index: Vec<usize>,
    b_index: Vec<usize>,
}

fn plan_batches(a_batch: &[usize], b_batch: &[usize]) -> Option<BatchPlan> {
    let out_batch = broadcast_shape(a_batch, b_batch)?;
    let total: usize = out_batch.iter().product();
    let rank = out_batch.len();
    let strides = |src: &[usize]| {
        let mut s = vec![0; rank];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            let o = i + rank - src.len();
            s[o] = if src[i] == 1 { 0 } else { acc };
            acc *= src[i];
        }
        s
    };
    let (sa, sb) = (strides(a_batch), strides(b_batch));
    let mut a_index = Vec::with_capacity(total);
    let mut b_index = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        a_index.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum());
        b_index.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(BatchPlan {
        out_batch,
        a_index,
        b_index,
    })
}

struct MatmulOp {
    a: Rc<Tensor>,
    b: Rc<Tensor>,
    m: usize,
    k: usize,
    n: usize,
    plan: BatchPlan,
}

impl Backward for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let gd = g.data();
        let mut ga = None;
        let mut gb = None;
        if needs[0] {
            let mut acc = Tensor::zeros(self.a.shape());
            let dst = acc.data_mut();
            for (bi, (&ia, &ib)) in self.plan.a_index.iter().zip(&self.plan.b_index).enumerate() {
                gemm_nt_acc(
                    &gd[bi * m * n..(bi + 1) * m * n],
                    &self.b.data()[ib * k * n..(ib + 1) * k * n],
                    &mut dst[ia * m * k..(ia + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            ga = Some(acc);
        }
        if needs[1] {
            let mut acc = Tensor::zeros(self.b.shape());
            let dst = acc.data_mut();
            for (bi, (&ia, &ib)) in self.plan.a_index.iter().zip(&self.plan.b_index).enumerate() {
                gemm_tn_acc(
                    &self.a.data()[ia * m * k..(ia + 1) * m * k],
                    &gd[bi * m * n..(bi + 1) * m * n],
                    &mut dst[ib * k * n..(ib + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            gb = Some(acc);
        }
        Ok(vec![ga, gb])
    }
}

impl Graph {
    /// Batched matrix product `a[.., m, k] x b[.., k, n] -> [.., m, n]`
    /// with NumPy broadcasting over the leading batch dimensions.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shape(
                "matmul",
                format!("operands need rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimensions differ: {sa:?} x {sb:?}"),
            ));
        }
        let plan = plan_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(|| {
            TensorError::shape(
                "matmul",
                format!("batch dimensions not broadcastable: {sa:?} x {sb:?}"),
            )
        })?;
        let batches = plan.a_index.len();
        let mut out = vec![0.0; batches * m * n];
        let (ad, bd) = (a.value().data(), b.value().data());
        for (bi, (&ia, &ib)) in plan.a_index.iter().zip(&plan.b_index).enumerate() {
            gemm_acc(
                &ad[ia * m * k..(ia + 1) * m * k],
                &bd[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = plan.out_batch.clone();
        shape.extend([m, n]);
        let out = Tensor::new(&shape, out)?;
        self.apply(
            MatmulOp {
                a: a.shared(),
                b: b.shared(),
                m,
                k,
                n,
                plan,
            },
            &[a, b],
            out,
        )
    }

    /// `x[.., in] * w[in, out] + bias[out]`.
    pub fn linear(&self, x: &Var, w: &Var, bias: Option<&Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(&y, b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = g.matmul(&i2, &m).unwrap();
        assert_eq!(y.value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn projector_keeps_first_row() {
        let g = Graph::new();
        let p = g.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        let m = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let y = g.matmul(&p, &m).unwrap();
        assert_eq!(y.value().data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[5, 2]));
        let err = g.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[5, 2]"), "{err}");
    }

    #[test]
    fn batch_broadcast() {
        let g = Graph::new();
        let a = g.constant(Tensor::ones(&[3, 2, 4]));
        let b = g.constant(Tensor::ones(&[4, 5]));
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[3, 2, 5]);
        assert!(y.value().data().iter().all(|&v| v == 4.0));
    }
}

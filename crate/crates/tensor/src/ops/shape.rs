use crate::error::{Result, TensorError};
use crate::graph::{Backward, Graph, Var};
use crate::tensor::{numel, resolve_axis, split_axis, Tensor};

/// Materializes `t` with its axes reordered so that output axis `i` is input axis `perm[i]`.
pub fn permute_tensor(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::shape(
            "permute",
            format!("{perm:?} is not a permutation of the axes of {shape:?}"),
        ));
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(&out_shape);
    let src = t.data();
    let mut out = Vec::with_capacity(total);
    if total > 0 {
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            out.push(src[off]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::new(&out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

struct ReshapeOp {
    shape: Vec<usize>,
}

impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, g: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone().reshape(&self.shape)?)])
    }
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl Backward for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, g: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(permute_tensor(g, &self.inverse)?)])
    }
}

struct ConcatOp {
    axis: usize,
    extents: Vec<usize>,
    shapes: Vec<Vec<usize>>,
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (outer, total, inner) = split_axis(g.shape(), self.axis);
        let gd = g.data();
        let mut start = 0;
        let mut grads = Vec::with_capacity(self.extents.len());
        for (i, &n) in self.extents.iter().enumerate() {
            if needs[i] {
                let mut part = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    part.extend_from_slice(&gd[base..base + n * inner]);
                }
                grads.push(Some(Tensor::new(&self.shapes[i], part)?));
            } else {
                grads.push(None);
            }
            start += n;
        }
        Ok(grads)
    }
}

struct SliceOp {
    axis: usize,
    start: usize,
    in_shape: Vec<usize>,
}

impl Backward for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, g: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (outer, total, inner) = split_axis(&self.in_shape, self.axis);
        let n = g.shape()[self.axis];
        let mut out = Tensor::zeros(&self.in_shape);
        let dst = out.data_mut();
        let gd = g.data();
        for o in 0..outer {
            let base = (o * total + self.start) * inner;
            dst[base..base + n * inner].copy_from_slice(&gd[o * n * inner..(o + 1) * n * inner]);
        }
        Ok(vec![Some(out)])
    }
}

struct GatherOp {
    axis: usize,
    index: Vec<usize>,
    in_shape: Vec<usize>,
}

impl Backward for GatherOp {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn backward(&self, g: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (outer, n_in, inner) = split_axis(&self.in_shape, self.axis);
        let n_out = self.index.len();
        let mut out = Tensor::zeros(&self.in_shape);
        let dst = out.data_mut();
        let gd = g.data();
        for o in 0..outer {
            for (j, &src) in self.index.iter().enumerate() {
                let to = (o * n_in + src) * inner;
                let from = (o * n_out + j) * inner;
                for k in 0..inner {
                    dst[to + k] += gd[from + k];
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

impl Graph {
    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = x.value().clone().reshape(shape)?;
        self.apply(
            ReshapeOp {
                shape: x.shape().to_vec(),
            },
            &[x],
            out,
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: &Var, perm: &[usize]) -> Result<Var> {
        let out = permute_tensor(x.value(), perm)?;
        self.apply(
            PermuteOp {
                inverse: inverse_perm(perm),
            },
            &[x],
            out,
        )
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[&Var], axis: isize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let rank = first.shape().len();
        let axis = resolve_axis("concat", axis, rank)?;
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for x in xs {
            let s = x.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape(
                    "concat",
                    format!("{:?} does not match {:?} off axis {axis}", s, first.shape()),
                ));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, total, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let n = x.shape()[axis];
                data.extend_from_slice(&x.value().data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        self.apply(
            ConcatOp {
                axis,
                extents: xs.iter().map(|x| x.shape()[axis]).collect(),
                shapes: xs.iter().map(|x| x.shape().to_vec()).collect(),
            },
            xs,
            out,
        )
    }

    /// The half-open range `start..end` along `axis`.
    pub fn slice(&self, x: &Var, axis: isize, start: usize, end: usize) -> Result<Var> {
        let shape = x.shape();
        let axis = resolve_axis("slice", axis, shape.len())?;
        if start > end || end > shape[axis] {
            return Err(TensorError::shape(
                "slice",
                format!("range {start}..{end} out of bounds for axis {axis} of {shape:?}"),
            ));
        }
        let (outer, total, inner) = split_axis(shape, axis);
        let n = end - start;
        let mut data = Vec::with_capacity(outer * n * inner);
        let src = x.value().data();
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&src[base..base + n * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = n;
        let out = Tensor::new(&out_shape, data)?;
        self.apply(
            SliceOp {
                axis,
                start,
                in_shape: shape.to_vec(),
            },
            &[x],
            out,
        )
    }

    /// Selects entries `index[j]` along `axis`. Indices may repeat; their
    /// gradients add up.
    pub fn gather(&self, x: &Var, axis: isize, index: &[usize]) -> Result<Var> {
        let shape = x.shape();
        let axis = resolve_axis("gather", axis, shape.len())?;
        let (outer, n_in, inner) = split_axis(shape, axis);
        if let Some(&bad) = index.iter().find(|&&i| i >= n_in) {
            return Err(TensorError::shape(
                "gather",
                format!("index {bad} out of bounds for axis {axis} of {shape:?}"),
            ));
        }
        let src = x.value().data();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * n_in + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = index.len();
        let out = Tensor::new(&out_shape, data)?;
        self.apply(
            GatherOp {
                axis,
                index: index.to_vec(),
                in_shape: shape.to_vec(),
            },
            &[x],
            out,
        )
    }
}

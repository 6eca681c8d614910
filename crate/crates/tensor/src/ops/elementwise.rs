use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::graph::{Backward, Graph, Var};
use crate::tensor::Tensor;

/// NumPy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides into a tensor of shape `src` when iterating the broadcast shape `out`.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let o = i + rank - src.len();
        strides[o] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of the broadcast shape.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) down to `target` shape.
fn reduce_to(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let out = grad.shape();
    let st = broadcast_strides(target, out);
    let zero = vec![0; out.len()];
    let mut acc = Tensor::zeros(target);
    let g = grad.data();
    let a = acc.data_mut();
    for_each_broadcast(out, &st, &zero, |flat, off, _| a[off] += g[flat]);
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryOp {
    kind: BinaryKind,
    a: Rc<Tensor>,
    b: Rc<Tensor>,
}

impl Backward for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let out_shape = g.shape();
        let mut ga = None;
        let mut gb = None;
        match self.kind {
            BinaryKind::Add | BinaryKind::Sub => {
                if needs[0] {
                    ga = Some(reduce_to(g, self.a.shape()));
                }
                if needs[1] {
                    let mut r = reduce_to(g, self.b.shape());
                    if self.kind == BinaryKind::Sub {
                        r.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    gb = Some(r);
                }
            }
            BinaryKind::Mul => {
                let sa = broadcast_strides(self.a.shape(), out_shape);
                let sb = broadcast_strides(self.b.shape(), out_shape);
                let (ad, bd, gd) = (self.a.data(), self.b.data(), g.data());
                if needs[0] {
                    let mut acc = Tensor::zeros(self.a.shape());
                    let dst = acc.data_mut();
                    for_each_broadcast(out_shape, &sa, &sb, |f, oa, ob| dst[oa] += gd[f] * bd[ob]);
                    ga = Some(acc);
                }
                if needs[1] {
                    let mut acc = Tensor::zeros(self.b.shape());
                    let dst = acc.data_mut();
                    for_each_broadcast(out_shape, &sa, &sb, |f, oa, ob| dst[ob] += gd[f] * ad[oa]);
                    gb = Some(acc);
                }
            }
        }
        Ok(vec![ga, gb])
    }
}

/// Elementwise activation functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Exact form `x * Phi(x)` using erf.
    Gelu,
    Silu,
    Softplus,
    Exp,
    Sigmoid,
}

impl std::str::FromStr for Activation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "silu" => Ok(Activation::Silu),
            "softplus" => Ok(Activation::Softplus),
            "exp" => Ok(Activation::Exp),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(TensorError::Config(format!("unknown activation '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at `x`, given the already computed output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
            Activation::Softplus => "softplus",
            Activation::Exp => "exp",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

struct UnaryOp {
    kind: Activation,
    input: Rc<Tensor>,
}

impl Backward for UnaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, g: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut out = g.clone();
        for (d, &x) in out.data_mut().iter_mut().zip(self.input.data()) {
            *d *= self.kind.derivative(x, self.kind.eval(x));
        }
        Ok(vec![Some(out)])
    }
}

struct ScaleOp {
    factor: f64,
}

impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, g: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.map(|v| v * self.factor))])
    }
}

struct SumOp {
    shape: Vec<usize>,
    factor: f64,
}

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, g: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(&self.shape, g.item()? * self.factor))])
    }
}

impl Graph {
    fn binary(&self, kind: BinaryKind, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| {
            TensorError::shape(
                match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                },
                format!("cannot broadcast {sa:?} with {sb:?}"),
            )
        })?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let (ad, bd) = (a.value().data(), b.value().data());
        let data = if sa == sb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![0.0; out_shape.iter().product()];
            let stra = broadcast_strides(sa, &out_shape);
            let strb = broadcast_strides(sb, &out_shape);
            for_each_broadcast(&out_shape, &stra, &strb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
            data
        };
        let out = Tensor::new(&out_shape, data)?;
        self.apply(
            BinaryOp {
                kind,
                a: a.shared(),
                b: b.shared(),
            },
            &[a, b],
            out,
        )
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&self, x: &Var, factor: f64) -> Result<Var> {
        let out = x.value().map(|v| v * factor);
        self.apply(ScaleOp { factor }, &[x], out)
    }

    pub fn activation(&self, x: &Var, kind: Activation) -> Result<Var> {
        let out = x.value().map(|v| kind.eval(v));
        self.apply(
            UnaryOp {
                kind,
                input: x.shared(),
            },
            &[x],
            out,
        )
    }

    /// Activation selected by name; unknown names are a configuration error.
    pub fn apply_activation(&self, x: &Var, kind: &str) -> Result<Var> {
        self.activation(x, kind.parse()?)
    }

    pub fn gelu(&self, x: &Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn silu(&self, x: &Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn softplus(&self, x: &Var) -> Result<Var> {
        self.activation(x, Activation::Softplus)
    }

    pub fn exp(&self, x: &Var) -> Result<Var> {
        self.activation(x, Activation::Exp)
    }

    pub fn sigmoid(&self, x: &Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self, x: &Var) -> Result<Var> {
        let out = Tensor::scalar(x.value().sum());
        self.apply(
            SumOp {
                shape: x.shape().to_vec(),
                factor: 1.0,
            },
            &[x],
            out,
        )
    }

    pub fn mean(&self, x: &Var) -> Result<Var> {
        let n = x.value().numel();
        if n == 0 {
            return Err(TensorError::shape("mean", "empty tensor"));
        }
        let factor = 1.0 / n as f64;
        let out = Tensor::scalar(x.value().sum() * factor);
        self.apply(
            SumOp {
                shape: x.shape().to_vec(),
                factor,
            },
            &[x],
            out,
        )
    }
}

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::graph::{Backward, Graph, Var};
use crate::ops::elementwise::sigmoid;
use crate::tensor::{resolve_axis, split_axis, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

struct SoftmaxOp {
    axis: usize,
    input: Rc<Tensor>,
}

fn softmax_values(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let (outer, n, inner) = split_axis(shape, axis);
    let src = x.data();
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (src[at(j)] - m).exp();
                dst[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                dst[at(j)] /= z;
            }
        }
    }
    out
}

impl Backward for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, g: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let output = softmax_values(&self.input, self.axis);
        let (outer, n, inner) = split_axis(output.shape(), self.axis);
        let y = output.data();
        let gd = g.data();
        let mut dx = Tensor::zeros(output.shape());
        let out = dx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                for j in 0..n {
                    out[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

struct LayerNormOp {
    axis: usize,
    input: Rc<Tensor>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Rc<Tensor>,
}

impl Backward for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let shape = self.input.shape();
        let (outer, n, inner) = split_axis(shape, self.axis);
        let xs = self.input.data();
        let gd = g.data();
        let gamma = self.gamma.data();
        let mut dx = Tensor::zeros(shape);
        let mut dgamma = vec![0.0; n];
        let mut dbeta = vec![0.0; n];
        {
            let dxd = dx.data_mut();
            let nf = n as f64;
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let (mu, s) = (self.mean[o * inner + i], self.inv_std[o * inner + i]);
                    let xh = |j: usize| (xs[at(j)] - mu) * s;
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..n {
                        let gh = gd[at(j)] * gamma[j];
                        mean_g += gh;
                        mean_gx += gh * xh(j);
                        dgamma[j] += gd[at(j)] * xh(j);
                        dbeta[j] += gd[at(j)];
                    }
                    mean_g /= nf;
                    mean_gx /= nf;
                    for j in 0..n {
                        let gh = gd[at(j)] * gamma[j];
                        dxd[at(j)] = s * (gh - mean_g - xh(j) * mean_gx);
                    }
                }
            }
        }
        Ok(vec![
            needs[0].then_some(dx),
            needs[1].then(|| Tensor::new(&[n], dgamma)).transpose()?,
            needs[2].then(|| Tensor::new(&[n], dbeta)).transpose()?,
        ])
    }
}

struct MseOp {
    diff: Tensor,
}

impl Backward for MseOp {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn backward(&self, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let scale = 2.0 * g.item()? / self.diff.numel() as f64;
        let gp = self.diff.map(|d| d * scale);
        let gt = needs[1].then(|| gp.map(|v| -v));
        Ok(vec![needs[0].then_some(gp), gt])
    }
}

struct BceOp {
    logits: Rc<Tensor>,
    targets: Rc<Tensor>,
}

impl Backward for BceOp {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let scale = g.item()? / self.logits.numel() as f64;
        let gz = Tensor::new(
            self.logits.shape(),
            self.logits
                .data()
                .iter()
                .zip(self.targets.data())
                .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                .collect(),
        )?;
        let gy = needs[1].then(|| self.logits.map(|z| -z * scale));
        Ok(vec![needs[0].then_some(gz), gy])
    }
}

/// Numerically stable `max(z,0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_with_logits_value(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl Graph {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, x: &Var, axis: isize) -> Result<Var> {
        let shape = x.shape();
        let axis = resolve_axis("softmax", axis, shape.len())?;
        let out = softmax_values(x.value(), axis);
        self.apply(SoftmaxOp { axis, input: x.shared() }, &[x], out)
    }

    /// Normalizes over `axis` to zero mean and unit variance (biased, with
    /// [`LAYER_NORM_EPS`]), then applies the per-feature affine `gamma`, `beta`
    /// whose length equals the extent of `axis`.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, axis: isize) -> Result<Var> {
        let shape = x.shape();
        let axis = resolve_axis("layer_norm", axis, shape.len())?;
        let (outer, n, inner) = split_axis(shape, axis);
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(TensorError::shape(
                "layer_norm",
                format!(
                    "affine shapes {:?}/{:?} do not match axis {axis} of {shape:?}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let src = x.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut out = Tensor::zeros(shape);
        let mut means = vec![0.0; outer * inner];
        let mut inv_std = vec![0.0; outer * inner];
        {
            let dst = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mean = (0..n).map(|j| src[at(j)]).sum::<f64>() / n as f64;
                    let var = (0..n).map(|j| (src[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                    let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    inv_std[o * inner + i] = s;
                    means[o * inner + i] = mean;
                    for j in 0..n {
                        let h = (src[at(j)] - mean) * s;
                        dst[at(j)] = gd[j] * h + bd[j];
                    }
                }
            }
        }
        self.apply(
            LayerNormOp {
                axis,
                input: x.shared(),
                mean: means,
                inv_std,
                gamma: gamma.shared(),
            },
            &[x, gamma, beta],
            out,
        )
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&self, pred: &Var, target: &Var) -> Result<Var> {
        if pred.shape() != target.shape() {
            return Err(TensorError::shape(
                "mse",
                format!("{:?} vs {:?}", pred.shape(), target.shape()),
            ));
        }
        let diff = Tensor::new(
            pred.shape(),
            pred.value()
                .data()
                .iter()
                .zip(target.value().data())
                .map(|(p, t)| p - t)
                .collect(),
        )?;
        let loss = diff.dot(&diff) / diff.numel().max(1) as f64;
        self.apply(MseOp { diff }, &[pred, target], Tensor::scalar(loss))
    }

    /// Mean binary cross-entropy on logits against targets in [0, 1].
    pub fn bce_with_logits(&self, logits: &Var, targets: &Var) -> Result<Var> {
        if logits.shape() != targets.shape() {
            return Err(TensorError::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", logits.shape(), targets.shape()),
            ));
        }
        let n = logits.value().numel().max(1) as f64;
        let loss: f64 = logits
            .value()
            .data()
            .iter()
            .zip(targets.value().data())
            .map(|(&z, &y)| bce_with_logits_value(z, y))
            .sum::<f64>()
            / n;
        self.apply(
            BceOp {
                logits: logits.shared(),
                targets: targets.shared(),
            },
            &[logits, targets],
            Tensor::scalar(loss),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_handles_large_logits() {
        let g = Graph::inference();
        let x = g.leaf(Tensor::new(&[3], vec![1000.0, 1000.0, -1000.0]).unwrap());
        let y = g.softmax(&x, 0).unwrap();
        assert!((y.value().data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(y.value().data()[2], 0.0);
    }

    #[test]
    fn layer_norm_standardizes() {
        let g = Graph::inference();
        let x = g.leaf(Tensor::new(&[1, 4], vec![1., 2., 3., 4.]).unwrap());
        let gamma = g.leaf(Tensor::ones(&[4]));
        let beta = g.leaf(Tensor::zeros(&[4]));
        let y = g.layer_norm(&x, &gamma, &beta, -1).unwrap();
        let d = y.value().data();
        assert!(d.iter().sum::<f64>().abs() < 1e-12);
        let var = d.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.25 / (1.25 + LAYER_NORM_EPS)).abs() < 1e-12);
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce_with_logits_value(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logits_value(800.0, 1.0).abs() < 1e-300);
        assert!((bce_with_logits_value(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn mse_shape_mismatch() {
        let g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.mse(&a, &b), Err(TensorError::Shape { .. })));
    }
}

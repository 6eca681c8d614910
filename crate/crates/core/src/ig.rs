//! Integrated Gradients attribution.

use std::path::Path;

use brainmt_tensor::{Graph, Tensor};
use rayon::prelude::*;

use crate::error::{BrainError, Result};
use crate::model::{volume_tensor, BrainMT};
use crate::params::ParamStore;
use crate::volume::Volume4D;

/// Path points evaluated together; bounds the number of live gradients.
const PATH_CHUNK: usize = 8;

/// A differentiable scalar function of one tensor.
pub trait ScalarModel: Sync {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;

    fn value(&self, x: &Tensor) -> Result<f64> {
        Ok(self.value_and_grad(x)?.0)
    }
}

/// The network output as a function of its `[T, 1, H, W, D]` input, with parameters held fixed.
pub struct ModelOutput<'a> {
    pub model: &'a BrainMT,
    pub params: &'a ParamStore,
}

impl ScalarModel for ModelOutput<'_> {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let xv = g.leaf(x.clone());
        let out = self.model.forward(&g, &p, &xv)?;
        let y = g.sum(&out)?;
        g.backward(&y)?;
        let grad = g.grad(&xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((y.value().data()[0], grad))
    }

    fn value(&self, x: &Tensor) -> Result<f64> {
        let g = Graph::inference();
        let p = self.params.bind_constant(&g);
        let xv = g.constant(x.clone());
        Ok(self.model.forward(&g, &p, &xv)?.value().data()[0])
    }
}

/// `w . x`, for checking attributions against their closed form.
pub struct LinearModel {
    pub weights: Tensor,
}

impl ScalarModel for LinearModel {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        if x.shape() != self.weights.shape() {
            return Err(BrainError::Shape(format!(
                "input {:?} does not match weights {:?}",
                x.shape(),
                self.weights.shape()
            )));
        }
        Ok((self.weights.dot(x), self.weights.clone()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    /// Same shape as the input.
    pub values: Tensor,
    pub steps: usize,
    pub output: f64,
    pub baseline_output: f64,
    /// `|sum(values) - (F(x) - F(baseline))|`.
    pub residual: f64,
}

impl Attribution {
    /// Whether the completeness residual is within `1e-3 |dF| + 1e-6`.
    pub fn complete(&self) -> bool {
        self.residual < 1e-3 * (self.output - self.baseline_output).abs() + 1e-6
    }
}

/// Trapezoidal approximation of the path integral from `baseline` to `x`
/// over `steps` intervals:
/// `(x - x') * (1/m) sum_j w_j grad F(x' + (j / m)(x - x'))`, `j = 0..=m`,
/// with `w_0 = w_m = 1/2` and `w_j = 1` otherwise.
pub fn integrated_gradients(model: &dyn ScalarModel, x: &Tensor, baseline: &Tensor, steps: usize) -> Result<Attribution> {
    if steps == 0 {
        return Err(BrainError::Usage("integrated gradients needs at least one step".into()));
    }
    if x.shape() != baseline.shape() {
        return Err(BrainError::Shape(format!(
            "baseline {:?} does not match input {:?}",
            baseline.shape(),
            x.shape()
        )));
    }
    let diff: Vec<f64> = x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    let mut total = vec![0.0; x.numel()];
    let (mut output, mut baseline_output) = (f64::NAN, f64::NAN);
    let points: Vec<usize> = (0..=steps).collect();
    for chunk in points.chunks(PATH_CHUNK) {
        let results = chunk
            .par_iter()
            .map(|&j| {
                let a = j as f64 / steps as f64;
                let data = baseline.data().iter().zip(&diff).map(|(b, d)| b + a * d).collect();
                model.value_and_grad(&Tensor::new(x.shape(), data)?)
            })
            .collect::<Result<Vec<_>>>()?;
        for (&j, (value, grad)) in chunk.iter().zip(results) {
            let w = if j == 0 || j == steps { 0.5 } else { 1.0 };
            if j == 0 {
                baseline_output = value;
            }
            if j == steps {
                output = value;
            }
            for (acc, g) in total.iter_mut().zip(grad.data()) {
                *acc += w * g;
            }
        }
    }
    let values: Vec<f64> = total.iter().zip(&diff).map(|(g, d)| g * d / steps as f64).collect();
    let residual = (values.iter().sum::<f64>() - (output - baseline_output)).abs();
    Ok(Attribution {
        values: Tensor::new(x.shape(), values)?,
        steps,
        output,
        baseline_output,
        residual,
    })
}

/// Constant volume at the lowest intensity of `volume`, which after
/// normalization is the background fill value.
pub fn min_baseline(volume: &Volume4D) -> Result<Volume4D> {
    let min = volume.data().iter().copied().fold(f64::INFINITY, f64::min);
    volume.with_data(vec![min; volume.data().len()])
}

/// Attribution of the model output for one prepared volume.
pub fn attribute_volume(model: &BrainMT, params: &ParamStore, volume: &Volume4D, steps: usize) -> Result<(Attribution, Volume4D)> {
    let f = ModelOutput { model, params };
    let baseline = min_baseline(volume)?;
    let attr = integrated_gradients(&f, &volume_tensor(volume)?, &volume_tensor(&baseline)?, steps)?;
    let map = volume.with_data(attr.values.data().to_vec())?;
    Ok((attr, map))
}

/// Mean over frames, giving one value per voxel.
pub fn time_average(map: &Volume4D) -> Vec<f64> {
    let v = map.voxels();
    let mut out = vec![0.0; v];
    for t in 0..map.frames() {
        for (o, x) in out.iter_mut().zip(map.frame(t)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= map.frames() as f64);
    out
}

/// Writes `frame,rank,x,y,z,attribution` for the `k` voxels of largest
/// absolute attribution in every frame.
pub fn write_top_k(path: &Path, map: &Volume4D, k: usize) -> Result<()> {
    let [_, w, d] = map.dims();
    let io = |e: csv::Error| BrainError::parse(path, e.to_string());
    let mut out = csv::Writer::from_path(path).map_err(io)?;
    out.write_record(["frame", "rank", "x", "y", "z", "attribution"]).map_err(io)?;
    for t in 0..map.frames() {
        let frame = map.frame(t);
        let mut order: Vec<usize> = (0..frame.len()).collect();
        order.sort_by(|&a, &b| frame[b].abs().total_cmp(&frame[a].abs()).then(a.cmp(&b)));
        for (rank, &i) in order.iter().take(k).enumerate() {
            let (x, y, z) = (i / (w * d), (i / d) % w, i % d);
            out.write_record([
                t.to_string(),
                rank.to_string(),
                x.to_string(),
                y.to_string(),
                z.to_string(),
                frame[i].to_string(),
            ])
            .map_err(io)?;
        }
    }
    out.flush().map_err(|e| BrainError::io(path, e))
}

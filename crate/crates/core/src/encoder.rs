//! Patch embedding and the two-stage residual convolution encoder.

use brainmt_tensor::{Conv3dSpec, Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{BrainError, Result};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv3dSpec,
}

impl ConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: Conv3dSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = spec.kernel;
        let fan_in = c_in * k * k * k;
        ConvLayer {
            weight: store.add(format!("{name}.weight"), uniform_fan_in(&[c_out, c_in, k, k, k], fan_in, rng)),
            bias: store.add(format!("{name}.bias"), uniform_fan_in(&[c_out], fan_in, rng)),
            spec,
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        Ok(g.conv3d(x, p.get(self.weight), p.get(self.bias), self.spec)?)
    }
}

/// Affine parameters of a layer norm.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, name: &str, n: usize) -> Self {
        NormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[n])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[n])),
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var, axis: isize) -> Result<Var> {
        Ok(g.layer_norm(x, p.get(self.gamma), p.get(self.beta), axis)?)
    }
}

/// Residual body `LN(conv(GELU(LN(conv(x))))) + x` followed by a
/// kernel-2 stride-2 downsampling conv that doubles the channels.
#[derive(Clone, Debug)]
pub struct ConvStage {
    pub conv1: ConvLayer,
    pub norm1: NormParams,
    pub conv2: ConvLayer,
    pub norm2: NormParams,
    pub down: ConvLayer,
}

impl ConvStage {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let body = Conv3dSpec::new(3, 1, 1);
        ConvStage {
            conv1: ConvLayer::new(store, &format!("{name}.conv1"), channels, channels, body, rng),
            norm1: NormParams::new(store, &format!("{name}.norm1"), channels),
            conv2: ConvLayer::new(store, &format!("{name}.conv2"), channels, channels, body, rng),
            norm2: NormParams::new(store, &format!("{name}.norm2"), channels),
            down: ConvLayer::new(
                store,
                &format!("{name}.down"),
                channels,
                2 * channels,
                Conv3dSpec::new(2, 2, 0),
                rng,
            ),
        }
    }

    /// The channel-preserving residual part, on `[N, C, h, w, d]`.
    pub fn body(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = self.norm1.forward(g, p, &h, 1)?;
        let h = g.gelu(&h)?;
        let h = self.conv2.forward(g, p, &h)?;
        let h = self.norm2.forward(g, p, &h, 1)?;
        Ok(g.add(&h, x)?)
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let h = self.body(g, p, x)?;
        self.down.forward(g, p, &h)
    }
}

/// Maps frames `[T, 1, H, W, D]` to stage-2 features `[T, 4C, H/16, W/16, D/16]`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed1: ConvLayer,
    pub embed2: ConvLayer,
    pub stages: [ConvStage; 2],
    pub channels: usize,
}

/// Frames encoded together when gradients are off.
const INFERENCE_CHUNK: usize = 8;

impl Encoder {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let embed = Conv3dSpec::new(3, 2, 1);
        Encoder {
            embed1: ConvLayer::new(store, "embed.conv1", 1, channels, embed, rng),
            embed2: ConvLayer::new(store, "embed.conv2", channels, channels, embed, rng),
            stages: [
                ConvStage::new(store, "stage1", channels, rng),
                ConvStage::new(store, "stage2", 2 * channels, rng),
            ],
            channels,
        }
    }

    /// Two overlapping stride-2 convs with GELU between: `[N,1,H,W,D] -> [N,C,H/4,W/4,D/4]`.
    pub fn patch_embed(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let h = self.embed1.forward(g, p, x)?;
        let h = g.gelu(&h)?;
        self.embed2.forward(g, p, &h)
    }

    fn forward_all(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let mut h = self.patch_embed(g, p, x)?;
        for stage in &self.stages {
            h = stage.forward(g, p, &h)?;
        }
        Ok(h)
    }

    /// Encodes every frame independently. Without gradients, frames are
    /// processed in small chunks to bound peak memory.
    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != 1 {
            return Err(BrainError::Shape(format!(
                "encoder input must be [T, 1, H, W, D], got {shape:?}"
            )));
        }
        let t = shape[0];
        if g.grad_enabled() || t <= INFERENCE_CHUNK {
            return self.forward_all(g, p, x);
        }
        let mut parts = Vec::with_capacity(t.div_ceil(INFERENCE_CHUNK));
        for start in (0..t).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(t);
            let chunk = g.slice(x, 0, start, end)?;
            parts.push(self.forward_all(g, p, &chunk)?);
        }
        let refs: Vec<&Var> = parts.iter().collect();
        Ok(g.concat(&refs, 0)?)
    }
}

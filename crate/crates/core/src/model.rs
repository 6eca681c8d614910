//! Full network: conv encoder, token sequence, Mamba stack, transformer stack and head.

use brainmt_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Dense, TransformerBlock};
use crate::config::{ModelConfig, Task};
use crate::encoder::{Encoder, NormParams};
use crate::error::{BrainError, Result};
use crate::mamba::{MambaBlock, MambaDims};
use crate::params::{Bound, ParamStore};
use crate::tokens::PositionalParams;
use crate::volume::Volume4D;

#[derive(Clone, Debug)]
pub struct BrainMT {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub positional: PositionalParams,
    pub mamba: Vec<MambaBlock>,
    pub transformer: Vec<TransformerBlock>,
    pub head_norm: NormParams,
    pub head1: Dense,
    pub head2: Dense,
}

impl BrainMT {
    /// Builds the network and its freshly initialized parameters from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<(BrainMT, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let z = config.token_dim();
        let encoder = Encoder::new(&mut store, config.channels, &mut rng);
        let positional = PositionalParams::new(&mut store, config.frames, config.tokens_per_frame(), z, &mut rng);
        let dims = config.mamba_dims();
        let mamba = (0..config.mamba_layers)
            .map(|i| MambaBlock::new(&mut store, &format!("mamba{i}"), dims, &mut rng))
            .collect();
        let transformer = (0..config.transformer_layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("attn{i}"), z, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_norm = NormParams::new(&mut store, "head.norm", z);
        let head1 = Dense::new(&mut store, "head.fc1", z, z, &mut rng);
        let head2 = Dense::new(&mut store, "head.fc2", z, 1, &mut rng);
        let model = BrainMT {
            config: config.clone(),
            encoder,
            positional,
            mamba,
            transformer,
            head_norm,
            head1,
            head2,
        };
        Ok((model, store))
    }

    /// Token sequence `[T K + 1, Z]` from an input `[T, 1, H, W, D]`.
    pub fn tokens(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let c = &self.config;
        let expect = [c.frames, 1, c.dims[0], c.dims[1], c.dims[2]];
        if x.shape() != expect {
            return Err(BrainError::Shape(format!(
                "model expects input {expect:?}, got {:?}",
                x.shape()
            )));
        }
        let features = self.encoder.forward(g, p, x)?;
        self.positional.forward(g, p, &features)
    }

    /// Mamba blocks followed by transformer blocks.
    pub fn sequence_stack(&self, g: &Graph, p: &Bound, seq: &Var) -> Result<Var> {
        let c = &self.config;
        let (t, k) = (c.frames, c.tokens_per_frame());
        let mut h = seq.clone();
        for block in &self.mamba {
            h = block.forward(g, p, &h, t, k, c.scan_order)?;
        }
        for block in &self.transformer {
            h = block.forward(g, p, &h)?;
        }
        Ok(h)
    }

    /// `LN(cls) -> Linear -> GELU -> Linear`, giving a `[1]` output.
    pub fn head(&self, g: &Graph, p: &Bound, seq: &Var) -> Result<Var> {
        let cls = g.slice(seq, 0, 0, 1)?;
        let h = self.head_norm.forward(g, p, &cls, -1)?;
        let h = self.head1.forward(g, p, &h)?;
        let h = g.gelu(&h)?;
        let h = self.head2.forward(g, p, &h)?;
        Ok(g.reshape(&h, &[1])?)
    }

    /// Prediction (regression) or logit (classification) of shape `[1]`.
    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let seq = self.tokens(g, p, x)?;
        let seq = self.sequence_stack(g, p, &seq)?;
        self.head(g, p, &seq)
    }

    /// Gradient-free forward pass on a prepared volume.
    pub fn predict(&self, params: &ParamStore, volume: &Volume4D) -> Result<f64> {
        let g = Graph::inference();
        let p = params.bind_constant(&g);
        let x = g.constant(volume_tensor(volume)?);
        Ok(self.forward(&g, &p, &x)?.value().data()[0])
    }

    /// Task loss: mean squared error or binary cross-entropy on the logit.
    pub fn loss(&self, g: &Graph, output: &Var, target: f64) -> Result<Var> {
        let y = g.constant(Tensor::new(&[1], vec![target])?);
        Ok(match self.config.task {
            Task::Regression => g.mse(output, &y)?,
            Task::Classification => g.bce_with_logits(output, &y)?,
        })
    }
}

impl ModelConfig {
    pub fn mamba_dims(&self) -> MambaDims {
        MambaDims {
            model: self.token_dim(),
            inner: self.d_inner(),
            state: self.state_dim,
            dt_rank: self.dt_rank(),
            conv: self.conv_width,
        }
    }
}

/// The `[T, 1, H, W, D]` input tensor for a volume.
pub fn volume_tensor(volume: &Volume4D) -> Result<Tensor> {
    let [h, w, d] = volume.dims();
    Ok(Tensor::new(&[volume.frames(), 1, h, w, d], volume.data().to_vec())?)
}

//! Model/training configuration, presets and the flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BrainError, Result};

/// Token traversal order of the spatiotemporal body.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    /// Time varies fastest: all frames of one spatial cell are contiguous.
    TemporalFirst,
    /// Space varies fastest: one whole frame after another.
    SpatialFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSampling {
    /// Contiguous window at a random offset.
    Window,
    /// Random subset of frames kept in temporal order.
    Subset,
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, $($text:literal => $var:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = BrainError;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
                    $($text => Ok($var),)+
                    other => Err(BrainError::Config(format!(
                        concat!("unknown ", $what, " '{}' (expected one of: {})"),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $var { return f.write_str($text); })+
                unreachable!()
            }
        }
    };
}

text_enum!(ScanOrder, "scan order", "temporal_first" => ScanOrder::TemporalFirst, "spatial_first" => ScanOrder::SpatialFirst);
text_enum!(Task, "task", "regression" => Task::Regression, "classification" => Task::Classification);
text_enum!(FrameSampling, "frame sampling mode", "window" => FrameSampling::Window, "subset" => FrameSampling::Subset);

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Control condition: permute every subject's frames with a fixed random permutation.
    pub shuffle_frames: bool,
    /// Optional cap on the number of optimizer steps.
    pub max_steps: Option<usize>,
}

/// Architecture plus training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Spatial extents (H, W, D); each must be divisible by 16.
    pub dims: [usize; 3],
    /// Frames per sample (T).
    pub frames: usize,
    /// Patch-embedding channels (C); the token width is 4C.
    pub channels: usize,
    pub mamba_layers: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub state_dim: usize,
    pub expansion: usize,
    pub conv_width: usize,
    pub scan_order: ScanOrder,
    pub task: Task,
    pub frame_sampling: FrameSampling,
    pub seed: u64,
    pub train: TrainConfig,
}

pub const PRESETS: [&str; 4] = ["paper", "desk", "large", "small"];

impl ModelConfig {
    /// Full-size configuration: 12 Mamba and 8 transformer blocks, T = 200.
    pub fn paper() -> Self {
        ModelConfig {
            dims: [64, 64, 64],
            frames: 200,
            channels: 8,
            mamba_layers: 12,
            transformer_layers: 8,
            heads: 8,
            state_dim: 16,
            expansion: 2,
            conv_width: 4,
            scan_order: ScanOrder::TemporalFirst,
            task: Task::Regression,
            frame_sampling: FrameSampling::Window,
            seed: 0,
            train: TrainConfig {
                lr: 2e-4,
                weight_decay: 0.05,
                epochs: 20,
                warmup_epochs: 5,
                batch_size: 2,
                patience: 5,
                shuffle_frames: false,
                max_steps: None,
            },
        }
    }

    /// Laptop-scale configuration: 32^3 volumes, T = 16, 4 Mamba and 2 transformer blocks.
    pub fn desk() -> Self {
        let mut c = ModelConfig::paper();
        c.dims = [32, 32, 32];
        c.frames = 16;
        c.mamba_layers = 4;
        c.transformer_layers = 2;
        c.train.lr = 7e-4;
        c.train.epochs = 25;
        c.train.warmup_epochs = 5;
        c.train.patience = 25;
        c
    }

    /// Ablation preset with 24 Mamba and 16 transformer blocks.
    pub fn large() -> Self {
        let mut c = ModelConfig::paper();
        c.mamba_layers = 24;
        c.transformer_layers = 16;
        c
    }

    /// Ablation preset with 6 Mamba and 4 transformer blocks.
    pub fn small() -> Self {
        let mut c = ModelConfig::paper();
        c.mamba_layers = 6;
        c.transformer_layers = 4;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(ModelConfig::paper()),
            "desk" => Ok(ModelConfig::desk()),
            "large" => Ok(ModelConfig::large()),
            "small" => Ok(ModelConfig::small()),
            other => Err(BrainError::Config(format!(
                "unknown preset '{other}' (expected one of: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Token width Z = 4C.
    pub fn token_dim(&self) -> usize {
        4 * self.channels
    }

    pub fn d_inner(&self) -> usize {
        self.expansion * self.token_dim()
    }

    /// Rank of the step-size bottleneck, ceil(Z / 16).
    pub fn dt_rank(&self) -> usize {
        self.token_dim().div_ceil(16)
    }

    /// Spatial grid after the encoder, (H/16, W/16, D/16).
    pub fn grid(&self) -> [usize; 3] {
        self.dims.map(|d| d / 16)
    }

    /// Tokens per frame, K.
    pub fn tokens_per_frame(&self) -> usize {
        self.grid().iter().product()
    }

    /// Sequence length L = T K + 1.
    pub fn seq_len(&self) -> usize {
        self.frames * self.tokens_per_frame() + 1
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.dims)?;
        let cfg = |msg: String| Err(BrainError::Config(msg));
        if self.frames == 0 {
            return cfg("frames must be at least 1".into());
        }
        if self.channels == 0 || self.state_dim == 0 || self.expansion == 0 || self.conv_width == 0 {
            return cfg("channels, state_dim, expansion and conv_width must be positive".into());
        }
        if self.heads == 0 || self.token_dim() % self.heads != 0 {
            return cfg(format!(
                "token width {} (4 x channels) must be divisible by heads = {}",
                self.token_dim(),
                self.heads
            ));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return cfg("batch_size must be at least 1".into());
        }
        if !(t.lr.is_finite() && t.lr >= 0.0 && t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return cfg("lr and weight_decay must be finite and non-negative".into());
        }
        if t.warmup_epochs > t.epochs {
            return cfg(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                t.warmup_epochs, t.epochs
            ));
        }
        Ok(())
    }

    /// Applies recognized keys from a parsed config file; unknown keys are rejected.
    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        for (key, value) in kv.iter() {
            match key {
                "preset" | "n_subjects" | "frames_total" | "out_dir" | "data" => {}
                "dims" => self.dims = parse_dims(value)?,
                "frames" => self.frames = parse_value(key, value)?,
                "channels" => self.channels = parse_value(key, value)?,
                "mamba_layers" => self.mamba_layers = parse_value(key, value)?,
                "transformer_layers" => self.transformer_layers = parse_value(key, value)?,
                "heads" => self.heads = parse_value(key, value)?,
                "state_dim" => self.state_dim = parse_value(key, value)?,
                "expansion" => self.expansion = parse_value(key, value)?,
                "conv_width" => self.conv_width = parse_value(key, value)?,
                "scan_order" => self.scan_order = value.parse()?,
                "task" => self.task = value.parse()?,
                "frame_sampling" => self.frame_sampling = value.parse()?,
                "seed" => self.seed = parse_value(key, value)?,
                "lr" => self.train.lr = parse_value(key, value)?,
                "weight_decay" => self.train.weight_decay = parse_value(key, value)?,
                "epochs" => self.train.epochs = parse_value(key, value)?,
                "warmup_epochs" => self.train.warmup_epochs = parse_value(key, value)?,
                "batch_size" => self.train.batch_size = parse_value(key, value)?,
                "patience" => self.train.patience = parse_value(key, value)?,
                "shuffle_frames" => self.train.shuffle_frames = parse_value(key, value)?,
                "max_steps" => self.train.max_steps = Some(parse_value(key, value)?),
                other => {
                    return Err(BrainError::Config(format!("unknown configuration key '{other}'")))
                }
            }
        }
        Ok(())
    }
}

/// Rejects spatial extents that the four stride-2 stages cannot halve cleanly.
pub fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % 16 != 0) {
        return Err(BrainError::Config(format!(
            "spatial dims {dims:?} must each be a positive multiple of 16"
        )));
    }
    Ok(())
}

/// Parses `32`, `32x32x32` or `32,32,32`.
pub fn parse_dims(value: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = value
        .split(|c: char| c == ',' || c == 'x' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| parse_value("dims", p))
        .collect::<Result<_>>()?;
    match nums.as_slice() {
        [d] => Ok([*d; 3]),
        [h, w, d] => Ok([*h, *w, *d]),
        _ => Err(BrainError::Config(format!(
            "dims '{value}' must be one extent or three"
        ))),
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| BrainError::Config(format!("invalid value '{value}' for key '{key}'")))
}

/// Flat `key = value` configuration. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                BrainError::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(BrainError::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(BrainError::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BrainError::io(path, e))?;
        KvConfig::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// A key that must be present; the error names it.
    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| BrainError::Config(format!("missing required key '{key}'")))
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key).map(|v| parse_value(key, v)).transpose()
    }

    pub fn require_parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        parse_value(key, self.require(key)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }
}

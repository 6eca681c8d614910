//! Hybrid selective-state-space and attention model for 4-D volumetric time series.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cv;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod ig;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod ssm;
pub mod synthetic;
pub mod tokens;
pub mod train;
pub mod volume;

pub use config::{FrameSampling, KvConfig, ModelConfig, ScanOrder, Task, TrainConfig};
pub use error::{BrainError, Result};
pub use model::BrainMT;

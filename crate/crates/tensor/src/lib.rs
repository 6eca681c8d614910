//! Dense `f64` tensors with tape-based reverse-mode automatic differentiation.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Backward, Graph, NodeId, Var};
pub use ops::conv::Conv3dSpec;
pub use ops::elementwise::{broadcast_shape, sigmoid, softplus, Activation};
pub use ops::nn::{bce_with_logits_value, LAYER_NORM_EPS};
pub use ops::shape::permute_tensor;
pub use tensor::{numel, Tensor};

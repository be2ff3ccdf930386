//! Quantization-aware training and integer inference for message-passing
//! graph neural networks (GCN, GAT, GIN), with degree-based stochastic
//! protection of high in-degree nodes during training.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod int;
pub mod layers;
pub mod mask;
pub mod model;
pub mod quant;
pub mod studies;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

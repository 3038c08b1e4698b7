//! Structured pruning, layer-wise ratio search and post-training
//! quantization for a mean-scale hyperprior image codec.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod criteria;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod nas;
pub mod optim;
pub mod pipeline;
pub mod pruner;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! The mean-scale hyperprior codec, its entropy models and the RD loss.

mod config;
pub mod entropy;
mod loss;
mod model;

pub use config::{CodecConfig, CodecPreset, LayerKind, LayerSpec, Subnet};
pub use entropy::{FactorizedDensity, P_FLOOR, SIGMA_FLOOR};
pub use loss::{mse, rd_from_parts, RDLossBreakdown, DISTORTION_SCALE};
pub use model::{quantize_latent, CodecModel, ForwardMode, ForwardOutput, ForwardTrace, LatentQuant};

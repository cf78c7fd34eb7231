//! Mixed-precision KV-cache quantization.
//!
//! Layers whose Key/Value projections matter most to the loss (measured by
//! gradient norms) get wider codes; everything else drops to 2 bits. Recent
//! tokens stay in full precision inside a shrinking window, and attention
//! reads quantized history through fused dequantize-and-accumulate kernels.

pub mod attention;
pub mod bitpack;
pub mod cache;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod profiler;
pub mod quant;
pub mod tensor;
pub mod toymodel;
mod wire;

pub use error::{Error, Result};
pub use tensor::Tensor4;

//! Small f32 tensors with a tape-based reverse-mode autodiff.
//!
//! The op set is exactly what a pixel-space U-Net with attention needs:
//! convolutions, group norm, linear layers, fused attention, and a handful
//! of layout helpers. Every op runs single-threaded and is bit-reproducible.

mod gemm;
pub mod math;
pub mod ops;
pub mod optim;
mod tensor;
mod var;

pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor;
pub use var::Var;

//! Dense tensors, reverse-mode autodiff and the U-Net variants.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod tensor;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use tensor::Tensor;
pub use unet::{param_init, predict, unet_forward, ConvDims, Params, UNetSpec};

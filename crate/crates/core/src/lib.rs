//! EMOv2 building blocks: a small reverse-mode tensor engine, convolution and
//! normalization layers, window attention, the Meta Mobile Block family,
//! hierarchical backbones and an analytic cost model.

pub mod backbone;
pub mod checks;
pub mod block;
pub mod cost;
pub mod error;
pub mod flops;
pub mod io;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod window;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;

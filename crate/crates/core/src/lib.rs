//! Numerical core for the CoaT conv-attentional architecture family:
//! a minimal dense tensor, reverse-mode gradients with a finite-difference
//! harness, the factorized-attention and convolutional position-encoding
//! kernels with their quadratic oracles, serial/parallel co-scale blocks,
//! model assembly with parameter/FLOP accounting, and a complexity-scaling
//! benchmark harness.

pub mod alloc;
pub mod attention;
pub mod autograd;
pub mod error;
pub mod blocks;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

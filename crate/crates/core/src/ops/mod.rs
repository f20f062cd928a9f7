//! Numeric kernels on plain tensors. The differentiable versions live on
//! [`crate::tape::Tape`] and share these implementations.

pub mod conv;
pub mod nn;
pub mod sample;

pub use conv::{conv1x1, conv3d, ConvKernel};
pub use nn::{matmul, relu, sigmoid, softmax};
pub use sample::{resize, trilinear_sample, trilinear_sample_tensor, Stencil};

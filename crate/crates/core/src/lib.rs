//! Context-aware volumetric segmentation numerics.
//!
//! The crate provides a small dense-tensor library with a reverse-mode tape,
//! and on top of it the pieces of a context-aware brain-tumour segmentation
//! model:
//!
//! * [`graph`]: projection of backbone features onto a feature-interaction
//!   graph with deformable trilinear sampling, one graph-convolution
//!   reasoning step, and re-projection to the voxel grid.
//! * [`backbone`]: a UNet-style encoder-decoder with deep-supervision heads
//!   and the combined regularized loss.
//! * [`crf`]: the attention-gated mean-field CRF that fuses graph and
//!   convolution features, with energy and free-energy bookkeeping.
//! * [`metrics`], [`data`], [`train`] and [`pipeline`]: evaluation,
//!   volume I/O and augmentation, optimization, and end-to-end drivers.

pub mod backbone;
pub mod config;
pub mod crf;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod serialize;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

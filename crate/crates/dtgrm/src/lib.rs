//! Frame-wise action segmentation with dilated temporal graph reasoning.
//!
//! A dilated temporal convolutional backbone produces per-frame class
//! likelihoods; stacked refinement stages then reason over small per-frame
//! graphs at exponentially growing dilations to repair over-segmentation,
//! with an auxiliary frame-exchange task supervising the graph reasoning.
//!
//! The numeric core is generic over [`Scalar`] so the same code runs at
//! 32-bit (training default) and 64-bit (gradient checks, oracles).

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dtgrm;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod selfsup;
pub mod tensor;
pub mod timeline;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Concrete precision aliases.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Parameter32 = optim::Parameter<f32>;
pub type Parameter64 = optim::Parameter<f64>;

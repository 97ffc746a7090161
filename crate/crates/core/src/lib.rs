//! Prototype-based multi-label contrastive learning.
//!
//! The crate is organized bottom-up:
//!
//! * [`diff`]: tensors, a reverse-mode tape, SPD solves, gradient checking
//! * [`prototypes`]: class prototype estimation and refinement
//! * [`losses`]: the prototype contrastive loss and the baselines
//! * [`data`]: taxonomy, dataset containers, file formats, synthetic data
//! * [`encoders`]: desk-scale multimodal transformer encoders and fusion
//! * [`trainer`]: two-stage training loop, optimizer, checkpoints
//! * [`eval`]: prototype-based inference and multi-label metrics
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the `*64` aliases below are what the trainer and CLI use.

pub mod data;
pub mod diff;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod prototypes;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision tensor.
pub type Tensor64 = diff::Tensor<f64>;
/// Default-precision tape.
pub type Tape64 = diff::Tape<f64>;

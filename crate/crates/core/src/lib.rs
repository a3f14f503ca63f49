//! Deterministic small-scale CNN training with per-filter gradient
//! instrumentation and RandomOut: reinitializing convolutional filters whose
//! gradient norm has collapsed.
//!
//! Layout:
//! * [`tensor`]: `f64` tensors, matmul and valid 2-d convolution
//! * [`nn`]: layer graph, forward/backward, BatchNorm, per-filter groups
//! * [`optim`]: SGD and Adam
//! * [`init`]: counter-based RNG streams and Xavier init
//! * [`randomout`]: CGN scoring and filter resets
//! * [`models`]: CraterCNN and MiniInception
//! * [`data`]: loaders, synthetic craters, splitting, batch plans
//! * [`experiments`]: training runs, sweeps, metrics files
//! * [`gradcheck`]: finite-difference gradient verification

pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod init;
pub mod models;
pub mod nn;
pub mod optim;
pub mod randomout;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};

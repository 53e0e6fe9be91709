//! Spiking-network training engine.
//!
//! The engine trains spiking networks three ways: backpropagation through
//! time (the reference), a rate-based estimator that simulates T gradient-free
//! spike passes and then differentiates a single pass over average firing
//! rates, and ANN-guided distillation where hybrid models (SNN prefix +
//! learnable connector + frozen ANN tail) supervise intermediate blocks.
//! An analysis suite measures feature similarity, hybrid accuracy, and the
//! time/memory overhead of the two training modes.

pub mod error;
pub mod mem;
pub mod scalar;
pub mod tensor;
pub mod kernels;
pub mod rng;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod exec;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod runlog;
pub mod spiking;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

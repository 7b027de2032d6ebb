//! Federated learning simulator with per-client pruned subnetworks.
//!
//! Each client trains a copy of the shared model, prunes it iteratively by
//! weight magnitude (and optionally by batch-norm channel scale), and the
//! server averages every parameter only over the clients that still keep it.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Federated-learning simulator comparing classifier-head inference
//! (FedAvg, per-client Local training) with nearest-prototype inference
//! built from class-mean embeddings aggregated on the server.

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod output;
pub mod protocol;
pub mod prototype;
pub mod runner;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

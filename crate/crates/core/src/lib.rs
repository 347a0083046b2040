//! Projected Bayesian neural networks.
//!
//! Inference runs in three stages: harvest plausible weight vectors with a
//! cyclic-learning-rate ensemble ([`ensemble`]), compress them with a
//! prediction-constrained autoencoder ([`projector`]), then fit a mean-field
//! Gaussian over the latent code and the decoder parameters ([`vi`]).

pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod multitask;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod projector;
pub mod rng;
pub mod vi;

pub use error::{Error, Result};

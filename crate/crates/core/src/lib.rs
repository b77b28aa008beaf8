//! Two-stage long-horizon trajectory forecasting.
//!
//! A discrete-latent conditional VAE with Mogrifier-gated recurrent cells
//! generates trajectory proposals for each agent around a robot; a binary
//! classifier scores the proposals and the best-scoring one is the output.
//! Everything is built on the small reverse-mode differentiation core in
//! [`tensor`].

pub mod cells;
pub mod classifier;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{LtnError, Result};

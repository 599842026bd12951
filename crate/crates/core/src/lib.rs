//! Device-mismatch compensation for acoustic scene classification: log-mel
//! features, a factorized hierarchical VAE, latent-space device conversion,
//! a CNN scene classifier and a synthetic multi-device benchmark.

pub mod classifier;
pub mod conversion;
pub mod error;
pub mod features;
pub mod fhvae;
pub mod latents;
pub mod nn;
pub mod pipeline;
pub mod probe;
pub mod seed;
pub mod synthbench;

pub use error::{Error, Result};

//! Disentangled dual-consistency multi-view clustering.
//!
//! Each data view is modeled by an autoencoder whose latent code is split into
//! a Gaussian *private* part and a Gumbel-Softmax *shared* part; the shared
//! codes are tied across views by cross-view reconstruction, shared-information
//! inference, and a contrastive objective, and cluster assignments fall out of
//! the fused shared code. The crate provides the numeric substrate
//! ([`numerics`]), the latent-variable machinery ([`distributions`]), the model
//! itself ([`model`]), the training objective ([`losses`]) and loop
//! ([`trainer`]), clustering metrics ([`metrics`]), and dataset handling
//! ([`data`]).

pub mod data;
pub mod distributions;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
mod stream;
pub mod trainer;

pub use error::{Error, Result};

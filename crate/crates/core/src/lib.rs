//! Latent-space adversarial generation of multivariate time series.
//!
//! Sequences are compressed by a recurrent autoencoder into a latent vector
//! whose size does not depend on sequence length; a Wasserstein GAN with
//! gradient penalty learns that latent distribution; the decoder turns
//! sampled codes back into sequences. A missing-aware variant decides the
//! next timestamp and which features are observed before generating their
//! values. The [`eval`] module scores synthetic data for fidelity and
//! downstream utility.

pub mod autoencoder;
pub mod benchmark;
pub mod autograd;
pub mod batch;
pub mod data;
pub mod error;
pub mod eval;
pub mod missing;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod train;
pub mod wgan;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

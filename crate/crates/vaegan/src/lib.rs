//! CPU-only implementation of a VAE/GAN hybrid generative model.
//!
//! An encoder, a decoder that doubles as the GAN generator, and a
//! discriminator are trained jointly; the VAE reconstruction error is
//! measured in a hidden feature space of the discriminator instead of pixel
//! space. The crate also provides latent attribute-vector arithmetic, a
//! conditional model variant, a synthetic attributed-image dataset, and an
//! attribute-similarity evaluation harness, all reproducible bit-for-bit
//! from a seed.

pub mod attributes;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod models;
pub mod pnm;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

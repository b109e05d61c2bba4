//! Physics-enhanced Gaussian-process variational autoencoder.
//!
//! A GP prior over latent video dynamics whose kernel is the double
//! convolution of independent squared-exponential input processes through the
//! Green's function of a known linear system, combined with MLP
//! encoder/decoder networks trained by ELBO maximization.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod lti;
pub mod nets;
pub mod numerics;
pub mod vae;

pub use error::{Error, Result};

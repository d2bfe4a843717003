//! Guidance experiments for diffusion models on toy Gaussian mixtures.
//!
//! The crate trains a small block-structured denoiser, samples from it with
//! classifier-free guidance, autoguidance and stochastic sub-network (S²)
//! guidance, and measures how faithfully each sampler reproduces the target
//! mixture. The closed-form mixture score in [`gmm`] serves as the reference
//! for every numerical test.

pub mod config;
pub mod denoiser;
pub mod error;
pub mod experiments;
pub mod gmm;
pub mod guidance;
pub mod manifest;
pub mod metrics;
pub mod num;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};

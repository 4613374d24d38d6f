//! Hybrid data-driven / physics-constrained Gaussian process regression.
//!
//! The crate is split along the pipeline:
//!
//! - [`gp`]: kernels, Gram factorizations, marginal likelihood and posterior inference.
//! - [`deepnet`]: a dense encoder/decoder whose bottleneck feeds the deep kernel, with
//!   hand-written reverse-mode gradients, Adam and the `PCGPNET1` checkpoint format.
//! - [`physics`]: grid fields, Sobel gradients, variational losses and the finite-volume
//!   reference solver for `div(D grad u) = 0`.
//! - [`datagen`]: Karhunen-Loeve sampling of log-diffusivity fields and the `PCGPDS1`
//!   dataset format.
//! - [`trainer`]: the hybrid objective, the known/unknown batch split, the training loop
//!   and evaluation.
//! - [`config`]: flat `key=value` configuration files.

mod binio;
pub mod config;
pub mod datagen;
pub mod deepnet;
mod error;
pub mod gp;
mod linalg;
pub mod physics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

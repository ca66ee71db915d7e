//! Multivariate diffusion models with linear inference processes.

pub mod adjoint;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod elbo;
pub mod error;
pub mod kernel;
pub mod matops;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod train;

pub use error::{Error, Result};

/// A diffusion state: one row per data feature, column 0 holds the data
/// coordinate `z` and the remaining `K − 1` columns the auxiliaries `v`.
pub type AugmentedState = matops::Mat;

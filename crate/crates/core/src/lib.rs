//! Variational inference with predictive natural-gradient preconditioning.
//!
//! The crate covers dense linear algebra helpers, mean-field Gaussian
//! families, a handful of latent-variable models, Monte Carlo ELBO
//! estimation, predictive Fisher estimates (dense and Kronecker-factored)
//! and the optimization loop.

pub mod elbo;
pub mod error;
pub mod family;
pub mod fisher;
pub mod kfac;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod optim;
pub mod params;
pub mod problem;
mod reduce;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::SymMatrix;
pub use params::{ParamLayout, ParamVector};
pub use problem::{Batch, ViProblem};
pub use rng::{NoiseContext, NoiseDraw, NoiseKey, Stream};

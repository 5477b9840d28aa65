//! Perturbed Wasserstein gradient flow on particle ensembles.

pub mod ensemble;
pub mod error;
pub mod fdcheck;
pub mod gp_sampler;
pub mod harness;
pub mod hessian_op;
pub mod objective;
pub mod pwgf;
pub mod rng;

pub use ensemble::{ParticleEnsemble, StackedField};
pub use error::{Error, Result};

//! Graph-conditioned diffusion transformers for molecular conformer generation.
//!
//! The crate covers the full pipeline: molecular graph ingestion and featurization,
//! conditioning networks, non-equivariant and SO(3)-equivariant transformer blocks,
//! flow-matching training, Euler ODE sampling, and RMSD/coverage evaluation.

pub mod autodiff;
pub mod checks;
pub mod classify;
pub mod conditioning;
pub mod equivariant;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod molgraph;
pub mod nn;
pub mod priors;
pub mod train;

pub use error::{Error, Result};

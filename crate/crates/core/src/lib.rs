//! Procedurally generated Raven-style matrix puzzles over a factorized image
//! space, a jointly trained VAE and row-reasoning network, an oracle solver,
//! and disentanglement metrics.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod oracle;
pub mod par;
pub mod puzzle;
pub mod reasoner;
pub mod render;
pub mod rng;
pub mod space;
pub mod vae;

pub use error::{Error, Result};

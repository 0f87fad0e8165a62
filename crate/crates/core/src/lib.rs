//! Object-centric contrastive world models and their out-of-distribution
//! stress tests: environments, the slot/graph model, split construction,
//! latent ranking evaluation and factorization diagnostics.

pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod eval;
pub mod harness;
pub mod models;
pub mod oodgen;
pub mod provenance;

pub use error::{LabError, Result};

//! Dual-branch temporal classifier for capsule-endoscopy feature
//! sequences, at desk scale and free of heavyweight dependencies.
//!
//! The crate covers the whole chain: synthetic data generation
//! ([`datasynth`]), deterministic forward passes of the anatomy and
//! pathology branches ([`anatomy`], [`pathology`]), training-loss terms
//! with verified analytic gradients ([`losses`], [`gradcheck`]), the
//! five-stage inference post-processing pipeline ([`postprocess`]) and
//! temporal-mAP evaluation ([`evaluation`]). The `gtnet` binary wires
//! the stages into reproducible batch runs.

pub mod anatomy;
pub mod config;
pub mod datasynth;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod pathology;
pub mod postprocess;
pub mod rng;
pub mod tensorio;
pub mod weights;

pub use error::{Error, Result};
pub use tensorio::Matrix;

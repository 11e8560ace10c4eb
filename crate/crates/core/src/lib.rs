//! Fairness-aware, training-free video editing on a toy latent diffusion
//! model.
//!
//! The crate is organised bottom-up: [`tensor`] and [`ften`] provide dense
//! `f64` arrays and their file format, [`prompt`] the synthetic encoder and
//! soft debiasing, [`region`] the region and similarity masks,
//! [`self_attention`] and [`cross_attention`] the modulated attention
//! operators, [`diffusion`] the sampler and edit pipeline, and [`metrics`]
//! the evaluation protocol.

pub mod cross_attention;
pub mod diffusion;
pub mod error;
pub mod ften;
pub mod metrics;
pub mod prompt;
pub mod region;
pub mod self_attention;
pub mod tensor;

pub use error::{FameError, Result};
pub use tensor::Tensor;

/// Version stamped into run manifests.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

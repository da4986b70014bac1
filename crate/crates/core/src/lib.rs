//! Retrospective MRI motion correction with image priors.
//!
//! The crate covers the whole pipeline: bulk-motion artefact simulation in
//! k-space, assembly of prior images (same-slice donors or other contrasts of
//! the same subject), UNet/ResNet correction networks in baseline,
//! multi-channel and dual-branch configurations, training, and SSIM
//! evaluation.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod models;
pub mod motion;
pub mod pipeline;
pub mod priors;
pub mod ssim;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

//! In-context subject insertion for a toy MM-DiT rectified-flow sampler.
//!
//! The reference and target latents are placed side by side, denoised
//! jointly, and the target's attention is edited with a feature shift and
//! head-wise reweighting while unmasked target tokens are re-anchored to the
//! clean input each step.

pub mod attention;
pub mod cli;
pub mod error;
pub mod layout;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod sampler;

pub use error::{Error, Result};
pub use numerics::Tensor2D;

//! Positional-query conditioned diffusion for image outpainting.
//!
//! A sub-image (the anchor) and a relative placement of the region to
//! generate (the target) are turned into a per-patch positional query;
//! a transformer denoiser cross-attends from that query to the anchor and
//! the noisy target, so any expansion multiple costs one conditioning pass.

pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod image;
pub mod model;
pub mod position;
pub mod sampler;
pub mod trainer;

//! Slice-conditioned toolpath generation with a denoising diffusion model.
//!
//! The crate covers the whole pipeline: G-code parsing and emission, slice
//! geometry, dataset records, the encoder/denoiser network with its own
//! reverse-mode autodiff, the diffusion process, training and evaluation.

pub mod dataset;
pub mod diffusion;
pub mod eval;
pub mod gcode;
pub mod geometry;
pub mod model;
pub mod train;

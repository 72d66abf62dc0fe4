//! Dual-tracer PET image separation with texture-conditioned latent diffusion
//! and a transposed-attention transformer U-net.

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod latent_prior;
pub mod numerics;
pub mod pipeline;
pub mod texture;
pub mod transformer;

pub use error::{Error, Result};
pub use image::Image;

pub mod bake;
mod container;
pub mod dataset;
pub mod denoiser;
pub mod design;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod temporal;

pub use error::{Error, Result};

//! Small CPU tensor engine with reverse-mode differentiation.
//!
//! Just enough to train the texture denoiser and the design regressor:
//! convolutions, group norm, linear layers, attention primitives and a
//! mean-squared-error head, all generic over [`Scalar`] (`f32` or `f64`).

mod adam;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{GradTape, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-style normal init scaled by fan-in.
pub fn init_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("sized")
}

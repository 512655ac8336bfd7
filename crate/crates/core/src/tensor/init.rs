//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};

/// Uniform in `±sqrt(6 / fan_in)` (He-uniform), suited to ReLU stacks.
pub fn fan_in_uniform<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

pub fn uniform<F: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::c(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data)
}

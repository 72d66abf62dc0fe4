//! Explicitly seeded ChaCha8 streams. Nothing in the crate draws from ambient
//! randomness; every stochastic operation takes one of these.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Real, Tensor};

pub type Rng = ChaCha8Rng;

/// Independent stream `stream` of generator `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_tensor<T: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &normal_vec(rng, n)).expect("shape matches")
}

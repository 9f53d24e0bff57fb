//! Parameter initializers. Both are deterministic for a fixed seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// `rows × d` table with entries drawn from `N(0, σ = d^-1/2)`.
pub fn init_gaussian_embedding(rows: usize, d: usize, seed: u64) -> Tensor {
    assert!(rows >= 1 && d >= 1, "embedding dimensions must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
    let data = (0..rows * d).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(vec![rows, d], data).expect("consistent shape")
}

/// Half-width of the LeCun uniform interval, `√(3 / fan_in)`.
pub fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

/// Uniform in `±√(3/fan_in)`; `fan_in` is the leading dimension for
/// matrices used as `x · W`, and the length for vectors.
pub fn init_lecun_uniform(shape: &[usize], seed: u64) -> Tensor {
    let fan_in = shape[0].max(1);
    let bound = lecun_bound(fan_in);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count: usize = shape.iter().product();
    let data = (0..count).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

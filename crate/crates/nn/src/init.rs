//! Seeded parameter initialization.
//!
//! Each parameter draws from its own generator, seeded from the run seed and
//! the parameter's hierarchical name. Adding or removing an unrelated layer
//! therefore never shifts the initial values of the others.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Uniform in `(-bound, bound)`.
pub fn uniform(seed: u64, name: &str, rows: usize, cols: usize, bound: f32) -> Array2<f32> {
    let mut rng = rng_for(seed, name);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// He-uniform for layers followed by a rectifier.
pub fn he_uniform(seed: u64, name: &str, rows: usize, cols: usize, fan_in: usize) -> Array2<f32> {
    uniform(seed, name, rows, cols, (6.0 / fan_in as f32).sqrt())
}

/// `1/sqrt(fan_in)` uniform for linear output layers.
pub fn fan_in_uniform(seed: u64, name: &str, rows: usize, cols: usize, fan_in: usize) -> Array2<f32> {
    uniform(seed, name, rows, cols, 1.0 / (fan_in as f32).sqrt())
}

//! Seeded random streams.
//!
//! Every stochastic stage draws from ChaCha20 (`rand_chacha::ChaCha20Rng`)
//! seeded with `seed_from_u64`. ChaCha20 is a counter-based stream cipher, so
//! a `(seed, draw count)` pair fully identifies a value. Uniforms are the
//! 53-bit `[0, 1)` doubles of `rand`'s standard distribution; Gaussians use
//! `rand_distr::StandardNormal`.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type StreamRng = ChaCha20Rng;

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Derives an independent seed for a numbered sub-stream (splitmix64 mix).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn uniform(rng: &mut StreamRng) -> f64 {
    rng.random::<f64>()
}

pub fn gaussian(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec(rng: &mut StreamRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| gaussian(rng)).collect()
}

pub fn gaussian_tensor(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), gaussian_vec(rng, len))
}

pub fn gaussian_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> Tensor {
    gaussian_tensor(rng, &[rows, cols])
}

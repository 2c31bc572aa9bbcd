//! Seeded random streams. Every stochastic routine takes a caller-owned
//! stream so results are pure functions of (inputs, seed).

use crate::ndiff::Mat;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

/// The stream type used throughout the crate.
pub type Stream = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Stream {
    Stream::seed_from_u64(seed)
}

/// `rows × cols` matrix of independent standard normals.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// `n` independent draws from `U(lo, hi)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Independent stream `k` under the same seed.
pub fn stream(seed: u64, k: u64) -> Stream {
    let mut rng = seeded(seed);
    rng.set_stream(k);
    rng
}

//! Seeded randomness. Every stochastic path in the crate draws from a
//! `ChaCha8Rng` derived from an explicit seed so runs are reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `(base, index)`; used to derive per-sample and
/// per-step seeds so parallel and serial generation agree.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform samples in `[-scale, scale]`.
pub fn random_tensor<F: Real>(shape: &[usize], seed: u64, scale: f64) -> Tensor<F> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| F::cst(rng.random_range(-scale..=scale)))
}

pub fn normal_tensor<F: Real>(shape: &[usize], rng: &mut SeededRng, std: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::cst(z * std)
    })
}

pub fn uniform_in(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// FNV-1a, for stable content hashes in run metadata.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

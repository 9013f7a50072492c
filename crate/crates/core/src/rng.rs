//! Seeded randomness.
//!
//! Every random draw in the crate comes from a [`SplitMix64`] generator.
//! Experiments carry a single root seed; independent consumers (noise,
//! shuffling, latency, slice directions, ...) derive their own generator by
//! hashing the root seed together with a fixed stream id, so adding draws to
//! one stream never perturbs another.
//!
//! Derivation: `seed(stream) = mix(root ^ mix(stream + 1))` where `mix` is the
//! SplitMix64 finalizer (`z ^= z >> 30; z *= 0xbf58476d1ce4e5b9; z ^= z >> 27;
//! z *= 0x94d049bb133111eb; z ^= z >> 31`).

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
pub use rand_xoshiro::SplitMix64;

/// Named streams. Values are part of the reproducibility contract.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const TIMESTEP: u64 = 4;
    pub const LATENCY: u64 = 5;
    pub const DELAY: u64 = 6;
    pub const SLICES: u64 = 7;
    pub const TASK: u64 = 8;
    pub const CORRUPTION: u64 = 9;
    pub const MASK: u64 = 10;
}

fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for an independent sub-stream of `root`.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    mix(root ^ mix(stream.wrapping_add(1)))
}

pub fn rng_from_seed(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

pub fn stream_rng(root: u64, stream: u64) -> SplitMix64 {
    rng_from_seed(derive_seed(root, stream))
}

pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

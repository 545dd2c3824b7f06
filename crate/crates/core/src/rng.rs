//! Seed derivation. Every random stream is a pure function of the root seed
//! and a tuple of counters, so runs can be resumed mid-way and reproduce
//! the exact same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream identifiers.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const CROP: u64 = 4;
    pub const CORPUS: u64 = 5;
    pub const SYNTH: u64 = 6;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix(root), |acc, &c| splitmix(acc ^ splitmix(c)))
}

/// FNV-1a, used to give every named parameter its own init stream.
pub fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| StandardNormal.sample(&mut r)).collect()
}

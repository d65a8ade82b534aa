//! Counter-based random draws.
//!
//! Every value is a pure function of `(seed, key)`: there is no generator
//! state to share or advance, so draws can be taken in any order or in
//! parallel without changing results.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in the open interval (0, 1).
#[inline]
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn step(h: u64, k: u64, position: u64) -> u64 {
    mix64(h ^ mix64(k.wrapping_add(GOLDEN.wrapping_mul(position + 1))))
}

/// Hashes a seed and a key tuple into one 64-bit word.
#[inline]
pub fn hash_key(seed: u64, key: &[u64]) -> u64 {
    key.iter()
        .enumerate()
        .fold(mix64(seed ^ 0x6A09_E667_F3BC_C909), |h, (i, &k)| {
            step(h, k, i as u64)
        })
}

/// Ziggurat sample from a splitmix64 generator seeded with the key hash.
#[inline]
fn normal_from(h: u64) -> f64 {
    let mut rng = SplitMix64::from_seed(h.to_le_bytes());
    StandardNormal.sample(&mut rng)
}

/// Standard normal draw for `(seed, key)`.
#[inline]
pub fn standard_normal(seed: u64, key: [u64; 3]) -> f64 {
    normal_from(hash_key(seed, &key))
}

/// Draws sharing the first two key words, hashed once.
#[derive(Clone, Copy, Debug)]
pub struct Stream {
    prefix: u64,
}

impl Stream {
    pub fn new(seed: u64, prefix: [u64; 2]) -> Self {
        Stream {
            prefix: hash_key(seed, &prefix),
        }
    }

    /// Same value as `standard_normal(seed, [prefix[0], prefix[1], k])`.
    #[inline]
    pub fn normal(&self, k: u64) -> f64 {
        normal_from(step(self.prefix, k, 2))
    }
}

/// Uniform draw in (0, 1) for `(seed, key)`.
pub fn uniform(seed: u64, key: [u64; 3]) -> f64 {
    open_unit(mix64(hash_key(seed, &key) ^ 0xA409_3822_299F_31D0))
}

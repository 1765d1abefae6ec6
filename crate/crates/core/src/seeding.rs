//! Deterministic seed derivation.
//!
//! All randomness in this crate flows through [`ChaCha8Rng`] seeded with a
//! 64-bit value, so any draw reproduces bit-for-bit across runs and
//! platforms. Per-episode seeds are derived from the master seed with
//! SplitMix64 (Steele, Lea & Flood 2014), the standard 64-bit finalizer
//! used to expand a single seed into a stream of independent ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer: one full avalanche round over `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for episode `index` in a run keyed by `master_seed`.
///
/// Defined as `splitmix64(master_seed + index * GOLDEN)` with the usual
/// 2^64/phi increment, i.e. the index advances a SplitMix64 stream and the
/// finalizer decorrelates neighbouring indices.
pub fn episode_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// The crate-wide RNG: ChaCha with 8 rounds, seeded from a u64.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

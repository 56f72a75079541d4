//! Deterministic RNG construction and seed derivation.
//!
//! Every stochastic component takes an explicit RNG; all of them are ChaCha8
//! streams derived from user-visible seeds so runs are bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout training, attacks, and dataset generation.
pub type RunRng = ChaCha8Rng;

/// SplitMix64 step, used to derive well-separated sub-seeds.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG seeded from a single u64.
pub fn rng_from_seed(seed: u64) -> RunRng {
    RunRng::seed_from_u64(seed)
}

/// RNG for a (seed, stream) pair; distinct streams are statistically
/// independent for distinct tags.
pub fn rng_stream(seed: u64, tag: u64) -> RunRng {
    let mut key = [0u8; 32];
    let words = [
        mix64(seed),
        mix64(seed ^ tag),
        mix64(tag.wrapping_add(0x1234_5678_9abc_def0)),
        mix64(seed.wrapping_add(tag).wrapping_add(1)),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    RunRng::from_seed(key)
}

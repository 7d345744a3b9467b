//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 (a counter-based stream cipher generator
//! seeded with 64 bits). Independent streams for trial `i` of a run with base
//! seed `s` use the seed `s ⊕ splitmix64(i)`, so a trial's draws do not depend
//! on which thread runs it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of sub-stream `index` under `base`.
pub fn stream_seed(base: u64, index: u64) -> u64 {
    base ^ splitmix64(index)
}

/// Hashes a tuple of indices into one stream index.
pub fn combine(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3u64, |acc, &p| splitmix64(acc ^ p))
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(base: u64, index: u64) -> StreamRng {
    rng_from_seed(stream_seed(base, index))
}

//! Seedable, splittable random streams.
//!
//! All stochastic components draw from a named ChaCha8 stream derived from
//! `(seed, stream-id)`. ChaCha is counter-based, so a stream's output depends
//! only on the pair, never on how other components interleave their draws.
//! This is what makes seeded runs bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known stream ids. Components must not share a stream.
pub mod stream {
    /// Model parameter initialization.
    pub const INIT: u64 = 1;
    /// Environment layout (road segments, obstacles) and episode starts.
    pub const ENV: u64 = 2;
    /// Minibatch shuffling.
    pub const SHUFFLE: u64 = 3;
    /// Train/val/test split assignment.
    pub const SPLIT: u64 = 4;
    /// Epsilon-greedy exploration.
    pub const EXPLORE: u64 = 5;
    /// Prioritized replay sampling.
    pub const REPLAY: u64 = 6;
    /// Test-only scratch streams start here.
    pub const TEST: u64 = 1000;
}

/// A ChaCha8 generator positioned on stream `stream` of `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Derive a fresh seed for a sub-component (e.g. per-environment workers).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(salt.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

//! Seeded random number generation. Every stochastic choice in the crate
//! draws from a [`ChaCha8Rng`] derived from an explicit seed.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose under a base seed.
pub fn derived(seed: u64, stream: &str) -> ChaCha8Rng {
    // FNV-1a over the stream label, mixed into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

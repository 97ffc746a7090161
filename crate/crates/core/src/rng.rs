//! Deterministic randomness.
//!
//! Every stochastic choice in the crate (init, data shuffles, negative
//! sampling, token dropping, synthetic generation) draws from a stream
//! derived from one root seed plus a purpose label and an index. Run-to-run
//! variance is therefore attributable to the root seed alone, and any
//! consumer can be replayed in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a hash of a byte string; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(root, purpose, index)`.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    splitmix64(root ^ fnv1a(purpose.as_bytes()) ^ splitmix64(index.wrapping_add(1)))
}

/// A ChaCha stream for one consumer.
pub fn stream(root: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose, index))
}

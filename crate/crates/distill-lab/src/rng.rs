//! Seed derivation and RNG construction.
//!
//! All randomness flows from `ChaCha8` streams keyed by a user seed plus a
//! purpose tag, so sub-systems can draw independently without sharing mutable
//! state and without order-of-evaluation coupling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit mix (splitmix64 finalizer). Used to derive child seeds.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed, a purpose tag, and an index.
///
/// The tag keeps unrelated draws (noise, poses, cond-drop coin flips...)
/// on disjoint streams even when they share the base seed.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix(base);
    for &b in tag.as_bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ index)
}

/// Deterministic RNG for a derived seed.
pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

//! Deterministic seed derivation.
//!
//! Every source of randomness in the crate flows from a single `u64` master
//! seed. Sub-seeds are derived from (seed, purpose, index) so that e.g.
//! parallel per-record generation or per-fold training never depends on
//! scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child RNG from the master seed, a purpose label, and an index.
///
/// Identical (seed, purpose, index) triples always give identical streams.
pub fn derive_rng(seed: u64, purpose: &str, index: u64) -> ChaCha12Rng {
    let mut h = mix(seed);
    for &b in purpose.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    h = mix(h ^ index);
    let mut key = [0u8; 32];
    let mut state = h;
    for chunk in key.chunks_exact_mut(8) {
        state = mix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

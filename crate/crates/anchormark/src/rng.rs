//! Seeded random-stream derivation.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from a
//! user-facing `u64` seed plus a purpose tag and up to two indices. Streams
//! derived this way are stable across platforms and independent of worker
//! count, which is what the reproducibility contracts lean on.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// FNV-1a over the tag string; gives each purpose its own keyspace.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent stream from `(seed, tag, a, b)`.
pub fn derive(seed: u64, tag: &str, a: u64, b: u64) -> Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag_hash(tag).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Stream for a purpose with no index structure.
pub fn stream(seed: u64, tag: &str) -> Rng {
    derive(seed, tag, 0, 0)
}

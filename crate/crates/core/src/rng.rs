//! Deterministic random stream derivation.
//!
//! Every random decision in the lab draws from a stream derived from the run
//! seed, a purpose label, and the integer coordinates of the unit of work
//! (step, prompt slot, completion index, ...). Derivation hashes all of it
//! through SHA-256, so streams never collide or overlap across purposes and
//! the same coordinates always reproduce the same draws, no matter how work
//! is scheduled.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_rng(seed: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// First draw of a derived stream, for when a single u64 (a sub-seed) is all
/// that's needed.
pub fn derive_seed(seed: u64, label: &str, parts: &[u64]) -> u64 {
    use rand_chacha::rand_core::RngCore;
    derive_rng(seed, label, parts).next_u64()
}

/// 64-bit mix (splitmix64 finalizer). Used for cheap deterministic partitions
/// such as train/eval splits.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

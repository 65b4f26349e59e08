//! Deterministic seed derivation.
//!
//! Every randomized stage derives its own stream from the run seed and a
//! textual tag, so adding or reordering stages never shifts another
//! stage's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// ChaCha stream keyed by `(seed, tag)`.
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha20Rng {
    derive_rng_indexed(seed, tag, 0)
}

/// ChaCha stream keyed by `(seed, tag, index)`; used for per-epoch and
/// per-instance streams.
pub fn derive_rng_indexed(seed: u64, tag: &str, index: u64) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha20Rng::from_seed(key)
}

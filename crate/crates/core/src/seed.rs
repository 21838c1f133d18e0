//! Stable sub-seed derivation.
//!
//! Every random stream in the crate is keyed by `(seed, purpose, key)` so
//! results never depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

pub fn derive_seed(seed: u64, purpose: &str, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update((key.len() as u64).to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

pub fn stream(seed: u64, purpose: &str, key: &str) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, key))
}

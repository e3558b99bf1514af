//! Splittable seeding: every random stream is keyed by a master seed, a
//! role string and an index.
//!
//! `child = u64::from_le_bytes(sha256(le(master) || le(len(role)) || role || le(index))[..8])`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic child seed for `(master, role, index)`.
pub fn derive_seed(master: u64, role: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((role.len() as u64).to_le_bytes());
    h.update(role.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Random stream for `(master, role, index)`.
pub fn rng_for(master: u64, role: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, role, index))
}

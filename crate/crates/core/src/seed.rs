//! Named seed derivation.
//!
//! Every stochastic choice in the crate draws from an RNG seeded by
//! `derive_seed(root, purpose)`. There is no global RNG state, so the order
//! in which independent workers run never changes their output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hash a root seed and a purpose string into a child seed.
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Child seed for the `index`-th item of a named stream.
pub fn derive_indexed(root: u64, purpose: &str, index: u64) -> u64 {
    derive_seed(root, &format!("{purpose}#{index}"))
}

pub fn rng_for(root: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit digest of arbitrary bytes (token hashing, manifest digests).
pub fn digest64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

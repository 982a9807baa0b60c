//! Seed derivation. Every consumer of randomness gets its own stream derived
//! from a root seed and a purpose label, so streams are never shared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has at least 8 bytes"))
}

pub fn rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

/// Independent stream `index` under `(root, label)`.
pub fn indexed_rng(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut r = rng(root, label);
    r.set_stream(index);
    r
}

/// Hex SHA-256 prefix used to stamp artifacts.
pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

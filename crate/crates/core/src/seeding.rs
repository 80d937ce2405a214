//! Seed derivation and configuration digests.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Derives an independent seed for a named phase from a global seed:
/// the first 8 bytes (little endian) of `SHA-256(le_bytes(global) || label)`.
pub fn derive_seed(global: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// First 16 hex digits of the SHA-256 of the value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize to JSON");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

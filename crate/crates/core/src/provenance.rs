//! Content hashes and named seed substreams.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256.
pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    hash_bytes(&serde_json::to_vec(value).expect("serialisable value"))
}

/// Seed for the stream `name` under `root`: the first 8 bytes of
/// `sha256(root_le || name)`.
pub fn substream(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

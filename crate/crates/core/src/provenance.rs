//! Content hashes used to bind artifacts to the configuration that made them.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of `value`: object keys sorted, no
/// whitespace. Field order in the source text therefore never matters.
pub fn canonical_hash<S: Serialize>(value: &S) -> Result<String> {
    // serde_json's default map is ordered, so `to_value` canonicalises keys.
    let v = serde_json::to_value(value)?;
    Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}

pub fn params_hash(params: &[f32]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

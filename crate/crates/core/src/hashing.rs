//! Content hashes used for provenance and config identity.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::model::Weights;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the canonical JSON rendering of a value. Struct fields serialize
/// in declaration order, so the hash does not depend on how a config file
/// happened to order its keys.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    sha256_hex(v.to_string().as_bytes())
}

/// Hash of every parameter, as little-endian `f32` (the checkpoint precision),
/// so a saved and reloaded model hashes the same.
pub fn weights_hash(w: &Weights) -> String {
    let mut h = Sha256::new();
    for (key, m) in w.tensors() {
        let (layer, code) = key.record_key();
        h.update(layer.to_le_bytes());
        h.update([code]);
        for v in m.data() {
            h.update((*v as f32).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

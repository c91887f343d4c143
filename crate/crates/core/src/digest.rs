//! SHA-256 digests used for provenance in every persisted artifact.

use sha2::{Digest as _, Sha256};

pub type Digest = [u8; 32];

pub fn of_bytes(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

/// Digest of a real vector's little-endian byte image.
pub fn of_f64s(values: &[f64]) -> Digest {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

pub fn to_hex(d: &Digest) -> String {
    hex::encode(d)
}

pub fn from_hex(s: &str) -> Option<Digest> {
    hex::decode(s).ok()?.try_into().ok()
}

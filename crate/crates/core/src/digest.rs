//! Short content digests for provenance records.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn of_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Digest of the compact JSON serialization of `value`.
pub fn of_json<T: Serialize + ?Sized>(value: &T) -> String {
    of_bytes(&serde_json::to_vec(value).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vector() {
        assert_eq!(of_bytes(b"abc"), "ba7816bf8f01cfea");
        assert_eq!(of_json(&[1, 2]), of_bytes(b"[1,2]"));
    }
}

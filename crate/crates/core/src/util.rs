use sha2::{Digest, Sha256};

/// Hex SHA-256 of `bytes`.
pub(crate) fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

//! Content hashes used to tie output files to the configuration that
//! produced them.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Hex SHA-256 of the compact JSON serialization of `value`.
///
/// Struct fields serialize in declaration order, so the hash is stable for a
/// given type layout and value.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

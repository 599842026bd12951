//! Self-describing JSON checkpoint container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// `{"format": ..., "version": ..., "payload": ...}`
#[derive(Debug, Serialize, Deserialize)]
struct Container<T> {
    format: String,
    version: u32,
    payload: T,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save<T: Serialize>(path: &Path, format: &str, payload: &T) -> Result<()> {
    let c = Container {
        format: format.to_string(),
        version: CHECKPOINT_VERSION,
        payload,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = serde_json::to_vec(&c)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: for<'de> Deserialize<'de>>(path: &Path, format: &str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let c: Container<T> = serde_json::from_slice(&bytes)?;
    if c.format != format {
        return Err(Error::format(
            path,
            format!("expected a `{format}` checkpoint, found `{}`", c.format),
        ));
    }
    if c.version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", c.version)));
    }
    Ok(c.payload)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

//! Content hashes recorded in every output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Git-style object hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{:x}", h.finalize())
}

/// Seed, config hash and input hashes keyed by role. Paths, worker counts
/// and timestamps are left out so outputs do not depend on them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, config_hash: String) -> Self {
        Self { command: command.into(), seed, config_hash, inputs: BTreeMap::new() }
    }

    pub fn input_bytes(&mut self, role: &str, bytes: &[u8]) {
        self.inputs.insert(role.into(), blob_hash(bytes));
    }

    pub fn input_file(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.input_bytes(role, &bytes);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_object_format() {
        // printf 'blob 0\0' | sha256sum
        assert_eq!(blob_hash(b""), "sha256:473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_ne!(blob_hash(b"a"), blob_hash(b"b"));
    }
}

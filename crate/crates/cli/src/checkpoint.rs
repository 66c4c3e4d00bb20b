//! Versioned binary tensor container.
//!
//! Layout: 8-byte magic `EMCIDCKP`, `u32` version, `u64` metadata length,
//! UTF-8 JSON metadata, then every tensor as raw little-endian `f64` in the
//! order listed by the metadata. Offsets are relative to the payload start.

use std::path::Path;

use emcid::tensor::Matrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"EMCIDCKP";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f64le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// What the file holds: `model`, `covariance`, `payloads`.
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    pub seed: u64,
    /// Free-form configuration snapshot and provenance.
    pub info: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub info: Value,
    pub tensors: Vec<(String, Matrix)>,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Format(msg.into())
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, info: Value) -> Self {
        Self { kind: kind.into(), seed, info, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix, CliError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| corrupt(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let e = TensorEntry { name: name.clone(), shape: [m.rows(), m.cols()], offset, dtype: DTYPE.into() };
                offset += 8 * m.data().len() as u64;
                e
            })
            .collect();
        let meta = Metadata { kind: self.kind.clone(), tensors, seed: self.seed, info: self.info.clone() };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let meta_end = 20usize
            .checked_add(usize::try_from(meta_len).map_err(|_| corrupt("metadata length overflows"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("metadata runs past end of file"))?;
        let meta: Metadata =
            serde_json::from_slice(&bytes[20..meta_end]).map_err(|e| corrupt(format!("metadata: {e}")))?;
        let payload = &bytes[meta_end..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for t in &meta.tensors {
            if t.dtype != DTYPE {
                return Err(corrupt(format!("tensor `{}` has dtype {}, expected {DTYPE}", t.name, t.dtype)));
            }
            if t.offset != expected {
                return Err(corrupt(format!("tensor `{}` offset {} overlaps or leaves a gap", t.name, t.offset)));
            }
            let len = t.shape[0].checked_mul(t.shape[1]).ok_or_else(|| corrupt("tensor shape overflows"))?;
            let start = t.offset as usize;
            let end = start.checked_add(8 * len).filter(|&e| e <= payload.len()).ok_or_else(|| {
                corrupt(format!("tensor `{}` runs past end of file", t.name))
            })?;
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], data)));
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        Ok(Self { kind: meta.kind, seed: meta.seed, info: meta.info, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self, CliError> {
        if self.kind != kind {
            return Err(corrupt(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("model", 7, json!({"note": "x"}));
        c.push("a", Matrix::from_vec(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -3.5, 0.1]));
        c.push("b", Matrix::from_vec(1, 1, vec![std::f64::consts::PI]));
        c.push("empty", Matrix::zeros(0, 4));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind, "model");
        for ((n1, m1), (n2, m2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(m1.shape(), m2.shape());
            let b1: Vec<u64> = m1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = m2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..8], b"EMCIDCKP");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        let mut v = bytes.clone();
        v[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CliError::Format(m)) if m.contains("version")));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut v = bytes.clone();
        v.push(0);
        assert!(Checkpoint::from_bytes(&v).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let c = sample();
        let bytes = c.to_bytes();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut meta: Metadata = serde_json::from_slice(&bytes[20..20 + len]).unwrap();
        meta.tensors[1].offset = 8;
        let json = serde_json::to_vec(&meta).unwrap();
        let mut v = bytes[..12].to_vec();
        v.extend_from_slice(&(json.len() as u64).to_le_bytes());
        v.extend_from_slice(&json);
        v.extend_from_slice(&bytes[20 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CliError::Format(m)) if m.contains("overlaps")));
    }
}

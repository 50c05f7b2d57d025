//! Versioned binary checkpoint container.
//!
//! Layout: magic `BCGANCKP`, format version (u32 LE), header length (u64 LE),
//! JSON header, raw little-endian `f64` payload, SHA-256 of everything before it.
//! The header carries metadata plus the name and length of every array; arrays
//! follow in header order. Encoding is deterministic, so decoding and re-encoding
//! reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BCGANCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Bcgan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: u64,
    pub config_digest: String,
    pub frozen_digest: String,
    /// Stage-specific metadata (architecture, configs, rng states).
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    iteration: u64,
    config_digest: String,
    frozen_digest: String,
    meta: serde_json::Value,
    arrays: Vec<(String, usize)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("array {name:?} missing")))
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::CorruptCheckpoint(format!("metadata field {key:?} missing")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::CorruptCheckpoint(format!("metadata field {key:?}: {e}")))
    }

    /// Refuses a checkpoint written under a different configuration.
    pub fn require_digest(&self, expected: &str) -> Result<()> {
        if self.config_digest != expected {
            return Err(Error::DigestMismatch { found: self.config_digest.clone(), expected: expected.to_string() });
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            iteration: self.iteration,
            config_digest: self.config_digest.clone(),
            frozen_digest: self.frozen_digest.clone(),
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = self.arrays.iter().map(|(_, v)| v.len() * 8).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + payload + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, v) in &self.arrays {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic or truncated)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != tail {
            return Err(corrupt("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[20..hend]).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let mut data = &body[hend..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for (name, len) in header.arrays {
            let nbytes = len.checked_mul(8).filter(|&n| n <= data.len()).ok_or_else(|| corrupt("payload truncated"))?;
            let values = data[..nbytes].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            data = &data[nbytes..];
            arrays.push((name, values));
        }
        if !data.is_empty() {
            return Err(corrupt("trailing payload bytes"));
        }
        Ok(Self {
            stage: header.stage,
            iteration: header.iteration,
            config_digest: header.config_digest,
            frozen_digest: header.frozen_digest,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            stage: Stage::Bcgan,
            iteration: 42,
            config_digest: "abc".into(),
            frozen_digest: "def".into(),
            meta: serde_json::json!({"b": 1.1, "a": [0.1, 1e-300]}),
            arrays: vec![("x".into(), vec![1.0, -0.0, f64::MIN_POSITIVE]), ("y".into(), vec![])],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().encode().unwrap();
        let mut flipped = bytes.clone();
        let k = flipped.len() - 40;
        flipped[k] ^= 1;
        assert!(matches!(Checkpoint::decode(&flipped), Err(Error::CorruptCheckpoint(_))));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(matches!(Checkpoint::decode(&versioned), Err(Error::CheckpointVersion { found: 9, .. })));
        assert!(matches!(Checkpoint::decode(&bytes[..10]), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(sample().require_digest("zzz"), Err(Error::DigestMismatch { .. })));
        assert!(sample().require_digest("abc").is_ok());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }
}

//! Self-describing binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                             |
//! |--------------|-----------------------------------------------------|
//! | 8            | magic `MEMTOCKP`                                    |
//! | 4            | format version (`u32`)                              |
//! | 8            | header length `H` (`u64`)                           |
//! | H            | UTF-8 JSON header                                   |
//! | payload      | raw `f64` tensors, row-major, at header offsets      |
//! | 32           | SHA-256 of every preceding byte                      |
//!
//! The header holds the model config, optional train config, phase marker
//! and a tensor table (`name`, `shape`, `dtype`, `offset` into the payload,
//! `len` in elements). Model weights use their parameter names; the memory
//! bank is `memory.items` and normalization stats are `norm.mean` and
//! `norm.std` (shape `1×n`).

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::model::{Memto, ModelConfig};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MEMTOCKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

const MEMORY_TENSOR: &str = "memory.items";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

/// Which training phase produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Phase1,
    Phase2,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Memto,
    pub norm: NormalizationStats,
    pub phase: Phase,
    pub train_config: Option<TrainConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    phase: Phase,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: usize,
    len: usize,
}

fn corrupt(msg: impl fmt::Display) -> Error {
    Error::Checkpoint(format!("corrupt container: {msg}"))
}

impl Checkpoint {
    pub fn new(
        model: Memto,
        norm: NormalizationStats,
        phase: Phase,
        train_config: Option<TrainConfig>,
    ) -> Self {
        Self {
            model,
            norm,
            phase,
            train_config,
        }
    }

    fn tensors(&self) -> Vec<(String, Mat)> {
        let mut out: Vec<(String, Mat)> = self
            .model
            .params()
            .iter()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        out.push((MEMORY_TENSOR.into(), self.model.memory().clone()));
        let row = |v: &[f64]| Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector");
        out.push((NORM_MEAN.into(), row(&self.norm.mean)));
        out.push((NORM_STD.into(), row(&self.norm.std)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                dtype: "f64".into(),
                offset: payload.len(),
                len: t.len(),
            });
            for v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            model_config: self.model.config().clone(),
            train_config: self.train_config.clone(),
            phase: self.phase,
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(corrupt(format!(
                "file is truncated ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (file truncated or modified)"));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(&body[PREFIX_LEN..payload_start])
            .map_err(|e| corrupt(format!("header: {e}")))?;
        let payload = &body[payload_start..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(corrupt(format!(
                    "tensor {} has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            if e.shape[0] * e.shape[1] != e.len || e.offset != expected_offset {
                return Err(corrupt(format!(
                    "tensor {} has an inconsistent table entry",
                    e.name
                )));
            }
            let end = e.offset + e.len * 8;
            if end > payload.len() {
                return Err(corrupt(format!(
                    "tensor {} extends past the payload",
                    e.name
                )));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((e.shape[0], e.shape[1]), data).map_err(corrupt)?;
            tensors.push((e.name.clone(), m));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }

        let mut take = |name: &str| -> Result<Mat> {
            let i = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            Ok(tensors.remove(i).1)
        };
        let memory = take(MEMORY_TENSOR)?;
        let mean = take(NORM_MEAN)?.into_raw_vec_and_offset().0;
        let std = take(NORM_STD)?.into_raw_vec_and_offset().0;
        if mean.len() != header.model_config.channels || std.len() != mean.len() {
            return Err(corrupt(
                "normalization stats do not match the channel count",
            ));
        }
        let model = Memto::from_parts(header.model_config, tensors, memory)?;
        Ok(Self {
            model,
            norm: NormalizationStats { mean, std },
            phase: header.phase,
            train_config: header.train_config,
        })
    }

    /// SHA-256 of the serialized container, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Writes atomically through a temporary file in the target directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp-write");
        let result = (|| {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        })();
        result.map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and rejects checkpoints whose model config differs from `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.ensure_config(expected)?;
        Ok(ckpt)
    }

    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        if self.model.config() != expected {
            return Err(Error::Checkpoint(format!(
                "model config mismatch: checkpoint has {:?}, expected {:?}",
                self.model.config(),
                expected
            )));
        }
        Ok(())
    }
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let cfg = ModelConfig {
            window_len: 8,
            channels: 3,
            latent_dim: 4,
            enc_layers: 1,
            enc_heads: 2,
            dec_layers: 2,
            memory_items: 2,
            tau: 0.1,
            dropout: 0.0,
        };
        let model = Memto::new(cfg, 9).unwrap();
        let norm = NormalizationStats {
            mean: vec![0.1, -2.0, 1e-300],
            std: vec![1.0, 0.3, 7.5],
        };
        Checkpoint::new(model, norm, Phase::Phase1, Some(TrainConfig::default()))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = tiny();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.model.memory(), c.model.memory());
        assert_eq!(back.model.params().values(), c.model.params().values());
        assert_eq!(back.model.params().names(), c.model.params().names());
        assert_eq!(back.norm, c.norm);
        assert_eq!(back.phase, Phase::Phase1);
        assert_eq!(back.train_config, c.train_config);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let bytes = tiny().to_bytes();
        for cut in [0, 5, 19, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("corrupt"), "{err}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 0x01;
        assert!(Checkpoint::from_bytes(&flipped)
            .unwrap_err()
            .to_string()
            .contains("corrupt"));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = tiny().to_bytes();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = tiny();
        c.save(&path).unwrap();
        assert!(Checkpoint::load_expecting(&path, c.model.config()).is_ok());
        let other = ModelConfig {
            memory_items: 3,
            ..c.model.config().clone()
        };
        assert!(Checkpoint::load_expecting(&path, &other).is_err());
    }
}

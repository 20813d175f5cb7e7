//! Checkpoint files.
//!
//! Layout: the 8-byte magic `TOKCKPT\n`, one line of JSON header, a `u64`
//! little-endian scalar count, then that many little-endian `f64` values in
//! parameter order. The header carries the labeler config, vocabulary,
//! shape directory, training metadata and the SHA-256 of the value block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{sha256_hex, Vocabulary};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Labeler, LabelerConfig};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"TOKCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: LabelerConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub meta: TrainingMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    labeler: LabelerConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
    meta: TrainingMeta,
    scalars: u64,
    digest: String,
}

impl Checkpoint {
    pub fn new(model: &Labeler, vocab: &Vocabulary, meta: TrainingMeta) -> Self {
        Self {
            config: model.config().clone(),
            vocab: vocab.clone(),
            params: model.params().clone(),
            meta,
        }
    }

    /// Rebuilds the labeler with the stored parameters.
    pub fn labeler(&self) -> Result<Labeler> {
        let mut model = Labeler::build(&self.config, 0)?;
        model
            .params_mut()
            .load(&self.params)
            .map_err(|e| CheckpointError::ShapeDirectory(e.to_string()))?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut block = Vec::with_capacity(self.params.num_scalars() * 8);
        for t in self.params.tensors() {
            for v in t.values() {
                block.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            labeler: self.config.clone(),
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
            scalars: self.params.num_scalars() as u64,
            digest: sha256_hex(&block),
        };
        let mut out = MAGIC.to_vec();
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        out.extend_from_slice(&(header.scalars).to_le_bytes());
        out.extend_from_slice(&block);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated("file ends inside the magic".into())
            } else {
                CheckpointError::BadMagic
            }
            .into());
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let rest = &bytes[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Truncated("file ends inside the header".into()))?;
        let value: serde_json::Value =
            serde_json::from_slice(&rest[..nl]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CheckpointError::Header("missing format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let header: Header = serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let rest = &rest[nl + 1..];
        if rest.len() < 8 {
            return Err(CheckpointError::Truncated("missing parameter block length".into()).into());
        }
        let count = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
        let block = &rest[8..];
        let want = count
            .checked_mul(8)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| CheckpointError::ShapeDirectory(format!("implausible scalar count {count}")))?;
        if block.len() < want {
            return Err(CheckpointError::Truncated(format!("parameter block has {} of {want} bytes", block.len())).into());
        }
        if block.len() > want {
            return Err(CheckpointError::ShapeDirectory(format!("{} bytes after the parameter block", block.len() - want)).into());
        }
        let listed: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if count != header.scalars || listed as u64 != count {
            return Err(CheckpointError::ShapeDirectory(format!(
                "block holds {count} values, header declares {} and shapes cover {listed}",
                header.scalars
            ))
            .into());
        }
        let computed = sha256_hex(block);
        if computed != header.digest {
            return Err(CheckpointError::Digest {
                stored: header.digest,
                computed,
            }
            .into());
        }

        let mut params = ParamStore::new();
        let mut values = block.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for entry in header.tensors {
            let n = entry.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| CheckpointError::ShapeDirectory(format!("{}: {e}", entry.name)))?;
            params.add(entry.name, t);
        }
        let ckpt = Self {
            config: header.labeler,
            vocab: header.vocab,
            params,
            meta: header.meta,
        };
        // Names and shapes must match what the config builds.
        ckpt.labeler()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

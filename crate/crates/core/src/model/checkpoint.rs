//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"KDLMCKPT"
//! 8       4     u32    format version (1)
//! 12      8     u64    header length H in bytes
//! 20      H     UTF-8 JSON header
//! 20+H    ...   payload: f32 tensors back to back
//! ```
//!
//! The header is `{"format_version", "config", "metadata", "tensors"}` where
//! each tensor entry is `{"name", "shape", "offset", "len"}`; `offset` is the
//! byte offset into the payload and `len` the element count. Tensor names
//! that start with `optim.` carry optimizer state rather than weights.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{param_specs, ParamStore};
use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"KDLMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Serialized model weights plus metadata and optional optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &Model<S>, metadata: serde_json::Value) -> Self {
        let tensors = model
            .params()
            .specs()
            .iter()
            .zip(model.params().tensors())
            .map(|(s, t)| (s.name.clone(), t.cast::<f32>()))
            .collect();
        Self {
            config: model.config().clone(),
            metadata,
            tensors,
        }
    }

    /// Rebuilds the model, ignoring non-parameter tensors.
    pub fn to_model<S: Scalar>(&self) -> Result<Model<S>> {
        let specs = param_specs(&self.config);
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in &specs {
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == spec.name)
                .ok_or_else(|| Error::Format {
                    what: "checkpoint",
                    detail: format!("missing tensor {}", spec.name),
                })?;
            tensors.push(t.cast::<S>());
        }
        Model::new(self.config.clone(), ParamStore::from_tensors(specs, tensors)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len() as u64,
            });
            offset += 4 * t.data.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "checkpoint",
            detail: detail.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let start = e.offset as usize;
            let end = start + 4 * e.len as usize;
            if end > payload.len() || e.shape.iter().product::<usize>() != e.len as usize {
                return Err(bad(&format!("tensor {} out of bounds", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor { shape: e.shape, data }));
        }
        Ok(Self {
            config: header.config,
            metadata: header.metadata,
            tensors,
        })
    }

    /// Writes via a temporary file and an atomic rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LanguageModel;

    #[test]
    fn round_trip_preserves_weights_and_logits() {
        let cfg = ModelConfig {
            vocab: 40,
            max_seq: 8,
            ..ModelConfig::preset("desk_student").unwrap()
        };
        let model = Model::<f32>::init(cfg, 5).unwrap();
        let ck = Checkpoint::from_model(&model, serde_json::json!({"epoch": 2}));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let m2: Model<f32> = back.to_model().unwrap();
        let toks = [1u32, 5, 9, 3];
        assert_eq!(model.logits(&toks, 1, 4).unwrap(), m2.logits(&toks, 1, 4).unwrap());
    }

    #[test]
    fn rejects_corrupt_bytes() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let cfg = ModelConfig {
            vocab: 10,
            max_seq: 4,
            n_layers: 1,
            ..ModelConfig::preset("desk_student").unwrap()
        };
        let ck = Checkpoint::from_model(&Model::<f32>::init(cfg, 0).unwrap(), serde_json::Value::Null);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}

//! Single-file checkpoints for backbones and incremental units.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"ISEGCKPT" | u32 format version | u64 header length | JSON header | f32 tensor data
//! ```
//!
//! The header lists tensors in path order; data follows in the same order.
//! Encoding is canonical, so load → save reproduces the original bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{IncrementalUnit, ModelConfig, SegmentationModel};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ISEGCKPT";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointKind {
    Backbone { class_ids: Vec<u8> },
    Unit { step_index: usize, novel_class_ids: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    config: ModelConfig,
    content: CheckpointKind,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub kind: CheckpointKind,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &SegmentationModel) -> Self {
        Self {
            config: model.config.clone(),
            seed: model.seed,
            kind: CheckpointKind::Backbone {
                class_ids: model.class_ids.clone(),
            },
            params: model.params.clone(),
        }
    }

    pub fn from_unit(unit: &IncrementalUnit) -> Self {
        Self {
            config: unit.config.clone(),
            seed: unit.seed,
            kind: CheckpointKind::Unit {
                step_index: unit.step_index,
                novel_class_ids: unit.novel_class_ids.clone(),
            },
            params: unit.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<SegmentationModel> {
        match self.kind {
            CheckpointKind::Backbone { class_ids } => Ok(SegmentationModel {
                config: self.config,
                class_ids,
                seed: self.seed,
                params: self.params,
            }),
            CheckpointKind::Unit { .. } => Err(Error::Data("checkpoint holds a unit, not a backbone".into())),
        }
    }

    pub fn into_unit(self) -> Result<IncrementalUnit> {
        match self.kind {
            CheckpointKind::Unit {
                step_index,
                novel_class_ids,
            } => Ok(IncrementalUnit {
                config: self.config,
                step_index,
                novel_class_ids,
                seed: self.seed,
                params: self.params,
            }),
            CheckpointKind::Backbone { .. } => Err(Error::Data("checkpoint holds a backbone, not a unit".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            content: self.kind.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * self.params.num_elements());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Integrity(format!("corrupt checkpoint: {what}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| corrupt(&e.to_string()))?;

        let mut params = ParamStore::new();
        let mut offset = body;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset + 4 * n;
            if end > bytes.len() {
                return Err(corrupt("truncated tensor data"));
            }
            let data: Vec<f32> = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).map_err(|e| corrupt(&e.to_string()))?;
            params.insert(entry.name.clone(), t);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            kind: header.content,
            params,
        })
    }

    /// Writes atomically and returns the SHA-256 of the written bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Write to a sibling temp file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("part")
    ));
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
    use crate::model::{build_incremental_unit, build_model};

    #[test]
    fn save_load_save_is_bit_exact() {
        let cfg = ModelConfig::default();
        let model = build_model(&cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let h1 = Checkpoint::from_model(&model).save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let h2 = loaded.save(&path).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(first, fs::read(&path).unwrap());
        assert_eq!(loaded.into_model().unwrap(), model);
    }

    #[test]
    fn unit_round_trip() {
        let cfg = ModelConfig::default();
        let unit = build_incremental_unit(&cfg, &[6], &[0, 1, 2, 3, 4, 5], 1, 3).unwrap();
        let bytes = Checkpoint::from_unit(&unit).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.clone().into_model().is_err());
        assert_eq!(back.into_unit().unwrap(), unit);
    }

    #[test]
    fn detects_corruption() {
        let model = build_model(&ModelConfig::default(), 1).unwrap();
        let bytes = Checkpoint::from_model(&model).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))));
    }
}

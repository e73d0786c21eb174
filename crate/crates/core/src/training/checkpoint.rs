//! Checkpoint persistence.
//!
//! File layout: magic bytes `PVCL`, a little-endian u32 format version, a
//! little-endian u32 header length, a JSON header (model config, variant
//! flags, standardizer statistics, and the ordered tensor table), then the
//! raw parameter values as little-endian f64 in table order.
//!
//! Everything serialized is deterministic — struct field order, table
//! order, and shortest-round-trip float formatting — so saving the same
//! model twice produces byte-identical files, and save→load→save is an
//! exact fixed point.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Standardizer;
use crate::model::{ModelConfig, ModelError, PvClient, VariantFlags};

pub const MAGIC: [u8; 4] = *b"PVCL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("header parse error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint file: bad magic bytes {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found}, this build reads version {VERSION}")]
    Version { found: u32 },
    #[error("truncated checkpoint: need {need} bytes for {what}, only {have} remain")]
    Truncated {
        what: &'static str,
        need: usize,
        have: usize,
    },
    #[error("payload size mismatch: tensor table needs {expected} bytes, file holds {found}")]
    Payload { expected: usize, found: usize },
    #[error("shape table mismatch at {name}: {detail}")]
    ShapeTable { name: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    flags: VariantFlags,
    standardizer: Standardizer,
    tensors: Vec<TensorEntry>,
}

/// One named parameter: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// In-memory image of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub flags: VariantFlags,
    pub standardizer: Standardizer,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    /// Snapshot of a model plus the standardizer its inputs assume.
    pub fn from_model(model: &PvClient, standardizer: &Standardizer) -> Checkpoint {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(name, t)| TensorRecord {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            version: VERSION,
            config: model.config,
            flags: model.flags,
            standardizer: standardizer.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config,
            flags: self.flags,
            standardizer: self.standardizer.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serialization");
        let payload_len: usize = self.tensors.iter().map(|t| t.values.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + header_bytes.len() + payload_len);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in &self.tensors {
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated {
                what: "file preamble",
                need: 12,
                have: bytes.len(),
            });
        }
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: bytes[..4].to_vec(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(CheckpointError::Truncated {
                what: "header",
                need: 12 + header_len,
                have: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
        let payload = &bytes[12 + header_len..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 8)
            .sum();
        if payload.len() != expected {
            return Err(CheckpointError::Payload {
                expected,
                found: payload.len(),
            });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut cursor = payload;
        for entry in header.tensors {
            let numel: usize = entry.shape.iter().product();
            let (chunk, rest) = cursor.split_at(numel * 8);
            cursor = rest;
            let values = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(TensorRecord {
                name: entry.name,
                shape: entry.shape,
                values,
            });
        }
        Ok(Checkpoint {
            version,
            config: header.config,
            flags: header.flags,
            standardizer: header.standardizer,
            tensors,
        })
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored values into `model`, requiring its parameter table
    /// to match the checkpoint name-for-name and shape-for-shape. The first
    /// offending tensor is named in the error.
    pub fn load_into(&self, model: &mut PvClient) -> Result<()> {
        let mut params = model.named_params_mut();
        for i in 0..params.len().max(self.tensors.len()) {
            match (params.get_mut(i), self.tensors.get(i)) {
                (Some((name, tensor)), Some(rec)) => {
                    if *name != rec.name {
                        return Err(CheckpointError::ShapeTable {
                            name: rec.name.clone(),
                            detail: format!("model expects tensor {name:?} at position {i}"),
                        });
                    }
                    if tensor.shape() != &rec.shape[..] {
                        return Err(CheckpointError::ShapeTable {
                            name: rec.name.clone(),
                            detail: format!(
                                "checkpoint shape {:?} vs model shape {:?}",
                                rec.shape,
                                tensor.shape()
                            ),
                        });
                    }
                }
                (Some((name, _)), None) => {
                    return Err(CheckpointError::ShapeTable {
                        name: name.clone(),
                        detail: "missing from the checkpoint".into(),
                    });
                }
                (None, Some(rec)) => {
                    return Err(CheckpointError::ShapeTable {
                        name: rec.name.clone(),
                        detail: "not a parameter of this model".into(),
                    });
                }
                (None, None) => unreachable!(),
            }
        }
        for ((_, tensor), rec) in params.iter_mut().zip(&self.tensors) {
            tensor.data_mut().copy_from_slice(&rec.values);
        }
        Ok(())
    }

    /// Reconstructs the model this checkpoint describes.
    pub fn build_model(&self) -> Result<(PvClient, Standardizer)> {
        // Seed is irrelevant: every parameter is overwritten from the table.
        let mut model = PvClient::new(self.config, self.flags, 0)?;
        self.load_into(&mut model)?;
        Ok((model, self.standardizer.clone()))
    }
}

pub fn save_checkpoint(model: &PvClient, standardizer: &Standardizer, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, standardizer).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(PvClient, Standardizer)> {
    Checkpoint::read(path)?.build_model()
}

//! On-disk bundles: `manifest.json` plus a flat `weights.bin`.
//!
//! Tensors are stored back to back in manifest order. `f32le` is row-major
//! little-endian IEEE-754; `i8` is one signed code per byte; `i4packed`
//! holds two signed 4-bit codes per byte, low nibble first.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "i8")]
    I8,
    #[serde(rename = "i4packed")]
    I4Packed,
}

impl DType {
    pub fn byte_len(self, numel: usize) -> usize {
        match self {
            DType::F32Le => numel * 4,
            DType::I8 => numel,
            DType::I4Packed => numel.div_ceil(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Model,
    Lora,
    QuantizedModel,
    Forecast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.dtype.byte_len(self.numel())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub role: Role,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f32>,
    pub tensors: Vec<TensorEntry>,
}

/// Tensor payloads of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Tensor),
    /// Integer codes with their logical shape; packed as the entry's dtype.
    Codes { shape: Vec<usize>, codes: Vec<i8>, dtype: DType },
}

impl Payload {
    fn shape(&self) -> &[usize] {
        match self {
            Payload::F32(t) => t.shape(),
            Payload::Codes { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32Le,
            Payload::Codes { dtype, .. } => *dtype,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(t) => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Codes { codes, dtype: DType::I4Packed, .. } => out.extend(pack_i4(codes)),
            Payload::Codes { codes, .. } => out.extend(codes.iter().map(|&c| c as u8)),
        }
    }
}

pub fn pack_i4(codes: &[i8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = (pair[0] as u8) & 0x0f;
            let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0f);
            lo | (hi << 4)
        })
        .collect()
}

pub fn unpack_i4(bytes: &[u8], numel: usize) -> Vec<i8> {
    let sext = |nib: u8| ((nib << 4) as i8) >> 4;
    let mut out = Vec::with_capacity(numel);
    for &b in bytes {
        out.push(sext(b & 0x0f));
        if out.len() < numel {
            out.push(sext(b >> 4));
        }
    }
    out.truncate(numel);
    out
}

/// A bundle held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub role: Role,
    pub config: ModelConfig,
    pub task_id: Option<String>,
    pub rank: Option<usize>,
    pub scale: Option<f32>,
    pub tensors: Vec<(String, Payload)>,
}

impl Bundle {
    pub fn new(role: Role, config: ModelConfig) -> Self {
        Bundle {
            role,
            config,
            task_id: None,
            rank: None,
            scale: None,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, payload: Payload) {
        self.tensors.push((name.into(), payload));
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    /// All f32 tensors by name.
    pub fn f32_tensors(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(n, p)| match p {
                Payload::F32(t) => Some((n.clone(), t.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, p)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: p.shape().to_vec(),
                    dtype: p.dtype(),
                    offset,
                };
                offset += e.byte_len();
                e
            })
            .collect();
        Manifest {
            role: self.role,
            config: self.config.clone(),
            task_id: self.task_id.clone(),
            rank: self.rank,
            scale: self.scale,
            tensors,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        let mut bin = Vec::new();
        for (_, p) in &self.tensors {
            p.encode(&mut bin);
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::write(dir.join(WEIGHTS), bin)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)?;
        let bin = fs::read(dir.join(WEIGHTS))?;
        let expected: usize = manifest.tensors.iter().map(TensorEntry::byte_len).sum();
        if expected != bin.len() {
            return Err(Error::bundle(
                dir,
                format!("manifest describes {expected} bytes, weights.bin has {}", bin.len()),
            ));
        }
        let mut cursor = 0;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.offset != cursor {
                return Err(Error::bundle(dir, format!("tensor {} at offset {} expected {cursor}", e.name, e.offset)));
            }
            let bytes = &bin[cursor..cursor + e.byte_len()];
            cursor += e.byte_len();
            let payload = match e.dtype {
                DType::F32Le => {
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Payload::F32(Tensor::new(e.shape.clone(), data)?)
                }
                DType::I8 => Payload::Codes {
                    shape: e.shape.clone(),
                    codes: bytes.iter().map(|&b| b as i8).collect(),
                    dtype: DType::I8,
                },
                DType::I4Packed => Payload::Codes {
                    shape: e.shape.clone(),
                    codes: unpack_i4(bytes, e.numel()),
                    dtype: DType::I4Packed,
                },
            };
            tensors.push((e.name.clone(), payload));
        }
        Ok(Bundle {
            role: manifest.role,
            config: manifest.config,
            task_id: manifest.task_id,
            rank: manifest.rank,
            scale: manifest.scale,
            tensors,
        })
    }
}

/// Write a model as an f32 bundle.
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    let mut b = Bundle::new(Role::Model, model.config().clone());
    for (name, t) in model.weights().named_tensors() {
        b.push(name, Payload::F32(t.clone()));
    }
    b.save(dir)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let b = Bundle::load(dir)?;
    if b.role != Role::Model {
        return Err(Error::bundle(dir, "not a model bundle"));
    }
    let weights = ModelWeights::from_named(&b.config, b.f32_tensors())?;
    Model::new(b.config, weights)
}

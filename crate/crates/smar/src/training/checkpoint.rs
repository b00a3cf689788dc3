//! Self-describing single-file checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u64 manifest length, the JSON
//! manifest, then the payload of 32-bit little-endian floats in manifest
//! order. The manifest pins the model configuration and the vocabulary hash,
//! so a checkpoint can never be loaded into a mismatched setup silently, and
//! save -> load -> save reproduces the file byte for byte.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{Model, ModelConfig, ModelParams};
use crate::error::{Result, SmarError};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"SMARCKP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Finetuned,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Pretrained => write!(f, "pretrained"),
            Stage::Finetuned => write!(f, "finetuned"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub step: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        step: u64,
        seed: u64,
        model: ModelConfig,
        vocab_hash: String,
        params: ModelParams,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(params.len());
        let mut offset = 0u64;
        for (name, t) in params.iter() {
            entries.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += (t.numel() * 4) as u64;
        }
        Ok(Checkpoint {
            manifest: Manifest {
                format_version: 1,
                stage,
                step,
                seed,
                model,
                vocab_hash,
                params: entries,
            },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| SmarError::io(parent.display().to_string(), e))?;
            }
        }
        let manifest_json = serde_json::to_vec(&self.manifest)?;
        let mut bytes = Vec::with_capacity(manifest_json.len() + 16 + self.params.numel() * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&manifest_json);
        for entry in &self.manifest.params {
            let t = self.params.get(&entry.name)?;
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        std::fs::write(path, bytes).map_err(|e| SmarError::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file =
            std::fs::File::open(path).map_err(|e| SmarError::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| SmarError::io(path.display().to_string(), e))?;

        let corrupt = |detail: &str| SmarError::CorruptCheckpoint(format!("{}: {detail}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing or wrong magic"));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(manifest_len)
            .ok_or_else(|| corrupt("manifest length overflows"))?;
        if bytes.len() < payload_start {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| corrupt(&format!("manifest is not valid JSON: {e}")))?;
        if manifest.format_version != 1 {
            return Err(corrupt(&format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }

        let payload = &bytes[payload_start..];
        let mut expected_offset = 0u64;
        let mut map = std::collections::BTreeMap::new();
        for entry in &manifest.params {
            if entry.offset != expected_offset {
                return Err(corrupt(&format!(
                    "parameter {} at offset {} expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel * 4;
            if payload.len() < end {
                return Err(corrupt(&format!("payload truncated at parameter {}", entry.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            map.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
            expected_offset = end as u64;
        }
        if payload.len() as u64 != expected_offset {
            return Err(corrupt("trailing bytes after payload"));
        }
        let params = ModelParams::from_map(&manifest.model, map)?;
        Ok(Checkpoint { manifest, params })
    }

    /// Errors when this checkpoint was produced under a different model
    /// configuration, naming the first differing field.
    pub fn ensure_model_config(&self, expected: &ModelConfig) -> Result<()> {
        let own = &self.manifest.model;
        if own.dim() != expected.dim() {
            return Err(SmarError::ConfigMismatch(format!(
                "model_dim k={} in checkpoint vs k={} expected",
                own.dim(),
                expected.dim()
            )));
        }
        if own != expected {
            return Err(SmarError::ConfigMismatch(format!(
                "checkpoint model config differs: {own:?} vs {expected:?}"
            )));
        }
        Ok(())
    }

    pub fn ensure_vocab_hash(&self, hash: &str) -> Result<()> {
        if self.manifest.vocab_hash != hash {
            return Err(SmarError::ConfigMismatch(format!(
                "vocab hash {} in checkpoint vs {hash} from corpus",
                self.manifest.vocab_hash
            )));
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::new(self.manifest.model.clone(), self.params.clone())
    }
}

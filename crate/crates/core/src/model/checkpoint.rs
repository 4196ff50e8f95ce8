//! Checkpoint files: a JSON manifest at `<path>` and a little-endian `f32`
//! blob at `<path>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, NetworkKind, Parameters, Tensor};
use crate::tokenizer::{TokenizerError, Vocab};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor `{name}`: manifest shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("blob truncated at byte offset {offset}: need {needed} bytes, file has {actual}")]
    Truncated { offset: u64, needed: u64, actual: u64 },
    #[error("expected a {expected:?} checkpoint, found {found:?}")]
    KindMismatch { expected: NetworkKind, found: NetworkKind },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: NetworkKind,
    config: ModelConfig,
    blob: String,
    blob_bytes: u64,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<String>,
}

/// A loaded checkpoint. The vocabulary travels with the weights when saved.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub vocab: Option<Vocab>,
}

impl Checkpoint {
    pub fn expect_kind(self, kind: NetworkKind) -> Result<Self, CheckpointError> {
        if self.params.kind != kind {
            return Err(CheckpointError::KindMismatch {
                expected: kind,
                found: self.params.kind,
            });
        }
        Ok(self)
    }
}

pub fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

pub fn save_checkpoint(p: &Parameters, vocab: Option<&Vocab>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let blob_file = blob_path(path);
    let mut blob = Vec::with_capacity(p.param_count() * 4);
    let mut tensors = Vec::with_capacity(p.tensors().len());
    for (name, t) in p.tensors() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset: blob.len() as u64,
        });
        for v in &t.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: p.kind,
        config: p.config.clone(),
        blob: blob_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len() as u64,
        tensors,
        vocab: vocab.map(Vocab::to_manifest),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    fs::write(&blob_file, &blob)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))? as u32;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    m.config.validate()?;
    let blob_file = path.with_file_name(&m.blob);
    let blob = fs::read(&blob_file)?;

    let expected = Parameters::zeros(m.kind, &m.config)?;
    let mut tensors = IndexMap::new();
    for (entry, (name, reference)) in m.tensors.iter().zip(expected.tensors()) {
        if &entry.name != name {
            return Err(CheckpointError::Manifest(format!(
                "tensor `{}` where `{name}` expected",
                entry.name
            )));
        }
        if entry.shape != reference.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: reference.shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let needed = reference.numel() as u64 * 4;
        let end = entry.offset + needed;
        if end > blob.len() as u64 {
            return Err(CheckpointError::Truncated {
                offset: blob.len() as u64,
                needed: end,
                actual: blob.len() as u64,
            });
        }
        let bytes = &blob[entry.offset as usize..end as usize];
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name.clone(), Tensor::from_values(&entry.shape, values));
    }
    if m.tensors.len() != expected.tensors().len() {
        return Err(CheckpointError::Manifest(format!(
            "{} tensors listed, layout has {}",
            m.tensors.len(),
            expected.tensors().len()
        )));
    }
    if (blob.len() as u64) < m.blob_bytes {
        return Err(CheckpointError::Truncated {
            offset: blob.len() as u64,
            needed: m.blob_bytes,
            actual: blob.len() as u64,
        });
    }
    let params = Parameters::from_tensors(m.kind, m.config, tensors)?;
    let vocab = m.vocab.as_deref().map(Vocab::from_manifest).transpose()?;
    Ok(Checkpoint { params, vocab })
}

/// Fails unless `b` can be initialized from `a`'s trunk.
pub fn check_compatible(a: &ModelConfig, b: &ModelConfig) -> Result<(), CheckpointError> {
    let pairs = [
        ("vocab_size", a.vocab_size, b.vocab_size),
        ("hidden_dim", a.hidden_dim, b.hidden_dim),
        ("ffn_dim", a.ffn_dim, b.ffn_dim),
        ("layer_count", a.layer_count, b.layer_count),
        ("head_count", a.head_count, b.head_count),
        ("latent_count", a.latent_count, b.latent_count),
        ("role_count", a.role_count, b.role_count),
        ("turn_count", a.turn_count, b.turn_count),
        (
            "position_embedding_size",
            a.position_embedding_size,
            b.position_embedding_size,
        ),
    ];
    for (name, x, y) in pairs {
        if x != y {
            return Err(CheckpointError::ConfigMismatch(format!("{name} {x} vs {y}")));
        }
    }
    Ok(())
}

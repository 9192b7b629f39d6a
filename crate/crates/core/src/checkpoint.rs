//! Checkpoint directories: `manifest.json` plus a little-endian `f32` blob.
//!
//! The manifest records the model configuration, interval grid,
//! vocabularies, training metadata and, for every named array, its shape,
//! dtype, byte offset and SHA-256 digest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};
use crate::survival::IntervalGrid;
use crate::tensor::{Element, Tensor};
use crate::tokenizer::{GeneVocab, MutationVocab};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_NAME: &str = "drp-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("not a checkpoint manifest: {0}")]
    Format(String),
    #[error("array {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("array {0} is missing from the checkpoint")]
    MissingArray(String),
    #[error("array {0} is not part of this model")]
    UnexpectedArray(String),
    #[error("weights blob is truncated: array {name} needs bytes {start}..{end} of {len}")]
    Truncated {
        name: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("checksum mismatch for array {0}")]
    ChecksumMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CheckpointError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnsupportedVersion { .. } => "unsupported_version",
            Self::Format(_) => "format",
            Self::ShapeMismatch { .. } => "shape_mismatch",
            Self::MissingArray(_) => "missing_array",
            Self::UnexpectedArray(_) => "unexpected_array",
            Self::Truncated { .. } => "truncated",
            Self::ChecksumMismatch(_) => "checksum_mismatch",
            Self::Model(_) => "model",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub stage: String,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default)]
    pub losses: BTreeMap<String, f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub grid: Option<IntervalGrid>,
    pub gene_vocab: GeneVocab,
    pub mutation_vocab: MutationVocab,
    pub metadata: TrainingMetadata,
    pub arrays: Vec<ArrayEntry>,
}

/// A trained model together with how it was produced.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub metadata: TrainingMetadata,
}

fn f32_bytes<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    t.data()
        .iter()
        .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
        .collect()
}

/// SHA-256 over the architecture, vocabularies, grid and every parameter
/// (as `f32`), independent of training metadata.
pub fn model_hash<T: Element>(model: &Model<T>) -> String {
    let mut h = Sha256::new();
    let header = serde_json::json!({
        "model": model.config,
        "grid": model.grid,
        "gene_vocab": model.gene_vocab,
        "mutation_vocab": model.mutation_vocab,
    });
    h.update(header.to_string().as_bytes());
    for (_, name, t) in model.store.iter() {
        h.update(name.as_bytes());
        h.update(format!("{:?}", t.shape()).as_bytes());
        h.update(f32_bytes(t));
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn hash(&self) -> String {
        model_hash(&self.model)
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        std::fs::create_dir_all(dir)?;
        let mut blob = Vec::with_capacity(self.model.store.num_scalars() * 4);
        let mut arrays = Vec::with_capacity(self.model.store.len());
        for (_, name, t) in self.model.store.iter() {
            let bytes = f32_bytes(t);
            arrays.push(ArrayEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: blob.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            blob.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            model: self.model.config.clone(),
            grid: self.model.grid.clone(),
            gene_vocab: self.model.gene_vocab.clone(),
            mutation_vocab: self.model.mutation_vocab.clone(),
            metadata: self.metadata.clone(),
            arrays,
        };
        std::fs::write(dir.join(WEIGHTS_FILE), &blob)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT_NAME) {
            return Err(CheckpointError::Format("missing or unknown format tag".into()));
        }
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Format("missing version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(CheckpointError::UnsupportedVersion { found: version as u32 });
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        let blob = std::fs::read(dir.join(WEIGHTS_FILE))?;

        let mut model = Model::<f32>::new(
            manifest.model.clone(),
            manifest.gene_vocab.clone(),
            manifest.mutation_vocab.clone(),
            manifest.grid.clone(),
            0,
        )?;
        let mut by_name: BTreeMap<&str, &ArrayEntry> = manifest.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let entry = by_name
                .remove(name.as_str())
                .ok_or_else(|| CheckpointError::MissingArray(name.clone()))?;
            let expected = model.store.get(id).shape().to_vec();
            if entry.shape != expected || entry.dtype != "f32" {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: entry.shape.clone(),
                });
            }
            let n: usize = expected.iter().product();
            let (start, end) = (entry.offset, entry.offset + 4 * n);
            if end > blob.len() {
                return Err(CheckpointError::Truncated {
                    name,
                    start,
                    end,
                    len: blob.len(),
                });
            }
            let bytes = &blob[start..end];
            if hex::encode(Sha256::digest(bytes)) != entry.sha256 {
                return Err(CheckpointError::ChecksumMismatch(name));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *model.store.get_mut(id) = Tensor::new(expected, data).expect("checked shape");
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(CheckpointError::UnexpectedArray(extra.to_string()));
        }
        Ok(Self {
            model,
            metadata: manifest.metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::{build_vocabularies, KnownPair};

    fn checkpoint() -> Checkpoint {
        let (gv, mv) = build_vocabularies(
            &["KRAS".to_string()],
            &[KnownPair {
                gene: "KRAS".into(),
                mutation: "G12V".into(),
                annotation: [1.0; 23],
            }],
        )
        .unwrap();
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                d: 8,
                heads: 2,
                ffn_dim: 8,
                layers: 1,
                ..Default::default()
            },
            intervals: 2,
            ..Default::default()
        };
        let grid = IntervalGrid::new(vec![10.0, 20.0]).unwrap();
        Checkpoint {
            model: Model::new(cfg, gv, mv, Some(grid), 9).unwrap(),
            metadata: TrainingMetadata {
                stage: "test".into(),
                ..Default::default()
            },
        }
    }

    #[test]
    fn round_trip_and_fault_injection() {
        let ck = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.hash(), ck.hash());
        assert_eq!(back.metadata, ck.metadata);

        let weights = dir.path().join(WEIGHTS_FILE);
        let original = std::fs::read(&weights).unwrap();
        let mut blob = original.clone();
        blob[17] ^= 0x40;
        std::fs::write(&weights, &blob).unwrap();
        let err = Checkpoint::load(dir.path()).unwrap_err();
        assert_eq!(err.code(), "checksum_mismatch");

        std::fs::write(&weights, &original[..original.len() - 3]).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap_err().code(), "truncated");

        let manifest = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, text.replace("\"version\": 1", "\"version\": 0")).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path()),
            Err(CheckpointError::UnsupportedVersion { found: 0 })
        ));
    }
}

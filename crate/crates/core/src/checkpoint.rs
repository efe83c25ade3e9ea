//! Checkpoint directories: `manifest.json` plus one raw little-endian f32
//! file per named tensor.

use std::path::Path;

use intuition_autograd::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_to_string, write_file, Error, Result};
use crate::model::{Model, ModelConfig, ParamMap};
use crate::objectives::Phase;

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub phase: Phase,
    pub seed: u64,
    pub step: u64,
    pub vocab_hash: String,
    pub usage_counts: Vec<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub phase: Phase,
    pub seed: u64,
    pub step: u64,
    pub vocab_hash: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Reads and version-checks `manifest.json` without loading tensors.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = read_to_string(&dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&text, &e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for (name, t) in self.model.params() {
            let bytes = to_bytes(t);
            let file = format!("{name}.bin");
            write_file(&dir.join(&file), &bytes)?;
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
                sha256: hex_digest(&bytes),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.model.config().clone(),
            phase: self.phase,
            seed: self.seed,
            step: self.step,
            vocab_hash: self.vocab_hash.clone(),
            usage_counts: self.model.usage_counts().to_vec(),
            tensors,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&dir.join(MANIFEST), json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mut params = ParamMap::new();
        for entry in &manifest.tensors {
            let file = dir.join(&entry.file);
            let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
            if hex_digest(&bytes) != entry.sha256 {
                return Err(Error::Checkpoint(format!("{}: checksum mismatch", entry.file)));
            }
            if bytes.len() % 4 != 0 {
                return Err(Error::Checkpoint(format!("{}: truncated", entry.file)));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
            params.insert(entry.name.clone(), t);
        }
        let model = Model::from_params(manifest.config, params, manifest.usage_counts)?;
        Ok(Self {
            model,
            phase: manifest.phase,
            seed: manifest.seed,
            step: manifest.step,
            vocab_hash: manifest.vocab_hash,
        })
    }

    /// Rejects use with a vocabulary other than the one trained on.
    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                found: vocab_hash.to_string(),
            });
        }
        Ok(())
    }
}

//! Checkpoint directory: `manifest.json`, `tensors.bin` (little-endian f32,
//! row-major) and `config.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{DType, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const CONFIG_FILE: &str = "config.json";
const FORMAT_VERSION: u32 = 1;
const PROJECTOR: &str = "patch_projector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into `tensors.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub fingerprint: String,
    pub total_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed optimiser updates.
    pub step: u64,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = vec![(PROJECTOR.to_string(), &self.params.patch_projector)];
        out.extend(self.params.named_tensors());
        out
    }

    /// Builds the manifest and blob without touching the filesystem.
    pub fn encode(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.tensors() {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: DType::F32,
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step: self.step,
            fingerprint: self.config.fingerprint(),
            total_bytes: blob.len() as u64,
            tensors: entries,
        };
        (manifest, blob)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blob) = self.encode();
        let write = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        let manifest = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
        write(MANIFEST_FILE, manifest.as_bytes())?;
        write(TENSORS_FILE, &blob)?;
        write(CONFIG_FILE, (self.config.to_json() + "\n").as_bytes())
    }

    /// Loads a checkpoint using the `config.json` stored alongside it.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::load_with_config(dir, config)
    }

    /// Loads tensors into a model shaped by `config`. Every stored tensor must
    /// match the shape `config` implies.
    pub fn load_with_config(dir: &Path, config: TrainConfig) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("corrupt manifest {}: {e}", path.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                manifest.format_version
            )));
        }
        let path = dir.join(TENSORS_FILE);
        let blob = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if blob.len() as u64 != manifest.total_bytes {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes, manifest expects {}",
                path.display(),
                blob.len(),
                manifest.total_bytes
            )));
        }
        Self::decode(&manifest, &blob, config)
    }

    fn decode(manifest: &Manifest, blob: &[u8], config: TrainConfig) -> Result<Self> {
        config.model.validate()?;
        let mut params = ModelParams::<f32>::init(&config.model, &config.recursion, config.seed)?;
        let mut entries: std::collections::HashMap<&str, &TensorEntry> =
            manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        if entries.len() != manifest.tensors.len() {
            return Err(Error::Checkpoint("duplicate tensor names in manifest".into()));
        }

        let mut fill = |name: String, t: &mut Tensor<f32>| -> Result<()> {
            let entry = entries
                .remove(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing from manifest")))?;
            if entry.dtype != DType::F32 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has dtype {:?}, expected f32",
                    entry.dtype
                )));
            }
            if entry.shape != t.shape() {
                return Err(Error::TensorShape {
                    name,
                    expected: t.shape().to_vec(),
                    found: entry.shape.clone(),
                });
            }
            let start = entry.offset as usize;
            let end = start + 4 * t.numel();
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{name}` runs past the end of the blob"))
            })?;
            for (v, b) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().unwrap());
            }
            Ok(())
        };
        fill(PROJECTOR.to_string(), &mut params.patch_projector)?;
        let mut result = Ok(());
        params.visit_mut(&mut |name, t| {
            if result.is_ok() {
                result = fill(name, t);
            }
        });
        result?;
        if let Some(name) = entries.keys().next() {
            return Err(Error::Checkpoint(format!(
                "manifest holds tensor `{name}` that the configured model lacks"
            )));
        }
        Ok(Checkpoint {
            config,
            step: manifest.step,
            params,
        })
    }
}

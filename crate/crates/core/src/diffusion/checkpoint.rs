use std::fs;
use std::path::Path;

use maskguide_nn::{ParamStore, Shape, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::ModelConfig;
use crate::{Error, Result};

pub const FORMAT: &str = "maskguide-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// sha256 over the format, config and tensor entries, so edits to the
    /// manifest itself are caught as well as edits to tensor files.
    pub digest: String,
}

impl Manifest {
    pub fn compute_digest(&self) -> String {
        let body = serde_json::to_vec(&(&self.format, &self.config, &self.tensors)).expect("manifest serializes");
        sha256_hex(&body)
    }
}

/// Named weights plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a single tensor's shape and little-endian bytes.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    h.update(t.to_le_bytes());
    hex::encode(h.finalize())
}

impl ModelCheckpoint {
    pub fn new(config: ModelConfig, params: ParamStore) -> Self {
        Self { config, params }
    }

    pub fn has_branch(&self, prefix: &str) -> bool {
        self.params.names().any(|n| n.starts_with(prefix))
    }

    /// Digest over every tensor name and value, independent of file layout.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            h.update(tensor_hash(t).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let file = format!("{name}.bin");
            let bytes = t.to_le_bytes();
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                file,
                sha256: sha256_hex(&bytes),
            });
        }
        let mut manifest = Manifest { format: FORMAT.into(), config: self.config.clone(), tensors, digest: String::new() };
        manifest.digest = manifest.compute_digest();
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let raw = fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_slice(&raw)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", manifest.format)));
        }
        if manifest.compute_digest() != manifest.digest {
            return Err(Error::Checkpoint(format!("{} does not match its digest", path.display())));
        }
        manifest.config.validate()?;
        let mut params = ParamStore::new();
        for e in &manifest.tensors {
            if params.contains(&e.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
            }
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            if e.file.contains('/') || e.file.contains('\\') || e.file.starts_with("..") {
                return Err(Error::Checkpoint(format!("tensor `{}` file escapes the checkpoint", e.name)));
            }
            let shape: Shape = e
                .shape
                .clone()
                .try_into()
                .map_err(|_| Error::Checkpoint(format!("tensor `{}` is not rank 4", e.name)))?;
            let fpath = dir.join(&e.file);
            let bytes = fs::read(&fpath).map_err(|err| Error::Checkpoint(format!("{}: {err}", fpath.display())))?;
            let digest = sha256_hex(&bytes);
            if digest != e.sha256 {
                return Err(Error::Checkpoint(format!(
                    "sha256 mismatch for `{}`: manifest {}, file {digest}",
                    e.name, e.sha256
                )));
            }
            let t = Tensor::from_le_bytes(shape, &bytes)
                .map_err(|err| Error::Checkpoint(format!("tensor `{}`: {err}", e.name)))?;
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor `{}` holds non-finite values", e.name)));
            }
            params.insert(e.name.clone(), t);
        }
        Ok(Self { config: manifest.config, params })
    }
}

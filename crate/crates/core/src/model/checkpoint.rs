//! Checkpoint file: a JSON manifest (config echo plus the tensor name index)
//! followed by the named tensors concatenated in manifest order, each in the
//! `DLC1` format. Byte output is deterministic for identical model state.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::layers::HasParams;
use crate::tensor::Tensor;

use super::{Model, ModelConfig, ModelError, Result};

const MAGIC: &[u8; 4] = b"DLCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<String>,
}

/// A model's configuration and named tensors, detached from the live model.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Snapshot parameters, BN running statistics, and any extra tensors
    /// (e.g. normalization statistics under `norm.*`).
    pub fn from_model(model: &mut Model, extra: &BTreeMap<String, Tensor>) -> Self {
        let mut tensors = BTreeMap::new();
        model.for_each_param("", &mut |name, p| {
            tensors.insert(name.to_string(), p.value.clone());
        });
        model.for_each_buffer(&mut |name, t| {
            tensors.insert(name.to_string(), t.clone());
        });
        for (name, t) in extra {
            tensors.insert(name.clone(), t.clone());
        }
        Self {
            config: model.config.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            config: self.config.clone(),
            tensors: self.tensors.keys().cloned().collect(),
        };
        let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        for tensor in self.tensors.values() {
            tensor
                .write_dlc1(&mut out)
                .expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        r.read_exact(&mut u32buf)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mlen = u32::from_le_bytes(u32buf) as usize;
        if r.len() < mlen {
            return Err(ModelError::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..mlen])
            .map_err(|e| ModelError::Checkpoint(format!("manifest parse: {e}")))?;
        r = &r[mlen..];
        let mut tensors = BTreeMap::new();
        for name in &manifest.tensors {
            let t = Tensor::read_dlc1(&mut r)
                .map_err(|e| ModelError::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.insert(name.clone(), t);
        }
        Ok(Self {
            config: manifest.config,
            tensors,
        })
    }

    /// Rebuild a live model: construct from the config, then overwrite every
    /// parameter and buffer from the named tensors.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), 0)?;
        let mut missing: Vec<String> = Vec::new();
        let mut mismatched: Vec<String> = Vec::new();
        model.for_each_param("", &mut |name, p| match self.tensors.get(name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
            Some(_) => mismatched.push(name.to_string()),
            None => missing.push(name.to_string()),
        });
        model.for_each_buffer(&mut |name, buf| match self.tensors.get(name) {
            Some(t) if t.shape() == buf.shape() => *buf = t.clone(),
            Some(_) => mismatched.push(name.to_string()),
            None => missing.push(name.to_string()),
        });
        if let Some(name) = missing.first() {
            return Err(ModelError::Checkpoint(format!("missing tensor {name}")));
        }
        if let Some(name) = mismatched.first() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has a shape incompatible with the config"
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        f.write_all(&bytes)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &mut Model,
    extra: &BTreeMap<String, Tensor>,
) -> Result<()> {
    Checkpoint::from_model(model, extra).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

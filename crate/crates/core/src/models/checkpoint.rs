//! JSON checkpoints: the config plus every named parameter tensor.

use super::{Model, ModelConfig, ModelError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(m: &Model) -> Self {
        Self {
            format: FORMAT,
            config: m.config.clone(),
            tensors: m
                .store
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuild the model; names, count and shapes must match exactly.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT {
            return Err(ModelError::Checkpoint(format!("unsupported format version {}", self.format)));
        }
        let mut m = Model::new(self.config.clone())?;
        if m.store.len() != self.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                m.store.len()
            )));
        }
        for nt in &self.tensors {
            let id = m
                .store
                .find(&nt.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor `{}`", nt.name)))?;
            let dst = m.store.get_mut(id);
            if dst.shape() != nt.shape.as_slice() || dst.numel() != nt.data.len() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    nt.name,
                    nt.shape,
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(&nt.data);
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

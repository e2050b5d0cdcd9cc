//! Self-describing JSON checkpoints.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::EntityVocab;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, vocab: &EntityVocab, seed: u64) -> Self {
        let tensors = model
            .layout
            .entries()
            .iter()
            .map(|e| Tensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: model.params[e.range()].iter().map(|p| p.as_f64()).collect(),
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            config: model.config.clone(),
            vocab_hash: vocab.hash(),
            seed,
            tensors,
        }
    }

    /// Rebuild the model, checking the vocabulary fingerprint when given.
    pub fn to_model<T: Scalar>(&self, vocab: Option<&EntityVocab>) -> Result<Model<T>> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "checkpoint format {} not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if let Some(v) = vocab {
            if v.hash() != self.vocab_hash {
                return Err(Error::Input("checkpoint was trained on a different vocabulary".into()));
            }
        }
        let total = super::ParamLayout::new(&self.config).total();
        let mut model = Model::from_params(self.config.clone(), vec![T::zero(); total])?;
        if self.tensors.len() != model.layout.entries().len() {
            return Err(Error::Input(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                model.layout.entries().len()
            )));
        }
        for t in &self.tensors {
            let e = model
                .layout
                .get(&t.name)
                .ok_or_else(|| Error::Input(format!("unexpected tensor {}", t.name)))?
                .clone();
            if e.shape != t.shape || t.data.len() != e.len() {
                return Err(Error::Input(format!("tensor {} has wrong shape", t.name)));
            }
            for (p, &v) in model.params[e.range()].iter_mut().zip(&t.data) {
                *p = T::lit(v);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

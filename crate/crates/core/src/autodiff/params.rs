use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::tensor::{load_tensor, save_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters, each paired with a gradient accumulator of identical shape.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
    pub seed: u64,
    pub step: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            ..Default::default()
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name:?}")));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {:?} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds the gradients of every parameter leaf on `tape` into the accumulators.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (var, id) in tape.param_leaves() {
            if let Some(g) = grads.get(var) {
                self.grads[id.0]
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

/// `manifest.json` inside a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub step: u64,
    pub params: Vec<ManifestEntry>,
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.lgut")
}

pub fn save_checkpoint(store: &ParamStore, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let file = file_name(store.name(id));
        save_tensor(store.value(id), dir.join(&file))?;
        params.push(ManifestEntry {
            name: store.name(id).to_string(),
            file,
            shape: store.value(id).shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        seed: store.seed,
        step: store.step,
        params,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint into a fresh store, preserving manifest order.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ParamStore> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let mut store = ParamStore::new(manifest.seed);
    store.step = manifest.step;
    for entry in manifest.params {
        let t = load_tensor(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {} has shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        store.add(entry.name, t)?;
    }
    Ok(store)
}

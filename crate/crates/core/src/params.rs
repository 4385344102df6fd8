//! Named parameter storage, gradients and checkpoint round-tripping.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, NumericError};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.rows(), value.cols());
        Parameter { name: name.into(), value, gradient }
    }
}

/// Ordered collection of parameters. BTreeMap keeps iteration (and hence
/// optimizer updates and serialized output) deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.params.contains_key(&name), "duplicate parameter `{name}`");
        self.params.insert(name.clone(), Parameter::new(name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.params[name].value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<(), NumericError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))?;
        p.gradient.add_assign(g);
        Ok(())
    }

    pub fn zero_gradients(&mut self) {
        for p in self.params.values_mut() {
            p.gradient.fill(0.0);
        }
    }

    pub fn global_grad_norm(&self) -> f64 {
        let ss: f64 = self
            .params
            .values()
            .flat_map(|p| p.gradient.data())
            .map(|g| g * g)
            .sum();
        ss.sqrt()
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: serde_json::Value,
    parameters: BTreeMap<String, ParamRecord>,
}

/// Write a versioned checkpoint: parameter values plus an opaque config
/// blob the caller uses to rebuild the model around them.
pub fn save_checkpoint<W: Write>(
    w: W,
    config: &serde_json::Value,
    store: &ParamStore,
) -> Result<(), ModelError> {
    let parameters = store
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                ParamRecord {
                    shape: [p.value.rows(), p.value.cols()],
                    values: p.value.data().to_vec(),
                },
            )
        })
        .collect();
    let file = CheckpointFile { format_version: CHECKPOINT_VERSION, config: config.clone(), parameters };
    serde_json::to_writer(w, &file)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: R) -> Result<(serde_json::Value, ParamStore), ModelError> {
    let file: CheckpointFile = serde_json::from_reader(r)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format_version {} (expected {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    let mut store = ParamStore::new();
    for (name, rec) in file.parameters {
        if rec.shape[0] * rec.shape[1] != rec.values.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter `{name}`: shape {:?} does not match {} values",
                rec.shape,
                rec.values.len()
            )));
        }
        store.insert(name, Tensor::new(rec.shape[0], rec.shape[1], rec.values));
    }
    Ok((file.config, store))
}

pub fn save_checkpoint_file(
    path: &Path,
    config: &serde_json::Value,
    store: &ParamStore,
) -> Result<(), ModelError> {
    let f = std::fs::File::create(path)?;
    save_checkpoint(std::io::BufWriter::new(f), config, store)
}

pub fn load_checkpoint_file(path: &Path) -> Result<(serde_json::Value, ParamStore), ModelError> {
    let f = std::fs::File::open(path)?;
    load_checkpoint(std::io::BufReader::new(f))
}

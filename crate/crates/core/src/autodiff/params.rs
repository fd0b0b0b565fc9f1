use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(id)
    }

    /// Glorot-uniform `[rows, cols]` matrix.
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| F::of(rng.gen_range(-limit..limit))).collect();
        self.add(name, Tensor::from_parts(vec![rows, cols], data))
    }

    /// Normal(0, std) entries.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| F::of(dist.sample(rng))).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, F::one()))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Copies every parameter of `src` whose name starts with `prefix`.
    /// Names and shapes must match exactly.
    pub fn copy_prefix_from(&mut self, src: &ParamStore<F>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (_, p) in src.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("parameter {} has no counterpart", p.name)))?;
            let dst = self.tensor_mut(id);
            if dst.shape() != p.tensor.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    dst.shape(),
                    p.tensor.shape()
                )));
            }
            *dst = p.tensor.clone();
            copied += 1;
        }
        let expected = self.params.iter().filter(|p| p.name.starts_with(prefix)).count();
        if copied != expected {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint provides {copied} of {expected} parameters under {prefix}"
            )));
        }
        Ok(copied)
    }
}

pub const CHECKPOINT_FORMAT: &str = "scanents-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk parameter map with a versioned header and optional model metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store<F: Scalar>(store: &ParamStore<F>, meta: serde_json::Value) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: F::NAME.into(),
            meta,
            params: store
                .params
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.to_f64_vec(),
                })
                .collect(),
        }
    }

    pub fn to_store<F: Scalar>(&self) -> Result<ParamStore<F>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported header {} v{}",
                self.format, self.version
            )));
        }
        let mut store = ParamStore::new();
        for r in &self.params {
            let t = Tensor::new(r.shape.clone(), r.data.iter().map(|&x| F::of(x)).collect())?;
            store.add(r.name.clone(), t)?;
        }
        Ok(store)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradengine::graph::Graph;

/// Checkpoint format version written by [`ParamStore::to_checkpoint`].
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Array2<f64>,
    grad: Array2<f64>,
    first_moment: Array2<f64>,
    second_moment: Array2<f64>,
    steps: u64,
}

impl Param {
    fn new(value: Array2<f64>) -> Self {
        let dim = value.dim();
        Self {
            value,
            grad: Array2::zeros(dim),
            first_moment: Array2::zeros(dim),
            second_moment: Array2::zeros(dim),
            steps: 0,
        }
    }
}

/// Named trainable arrays with gradient slots and Adam state.
///
/// Iteration is in lexicographic name order, so every sweep over the
/// parameters is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), Param::new(value));
    }

    /// Uniform `U(-bound, bound)` initialisation.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        bound: f64,
        rng: &mut impl Rng,
    ) {
        let value = Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound));
        self.insert(name, value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, name: &str) -> Result<&Array2<f64>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Array2<f64>> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn step_count(&self, name: &str) -> Result<u64> {
        self.params
            .get(name)
            .map(|p| p.steps)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Add `scale ×` the gradients of every parameter bound in `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph, scale: f64) -> Result<()> {
        for (name, var) in graph.bindings() {
            let Some(g) = graph.grad(*var) else {
                continue;
            };
            let param = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            param.grad.scaled_add(scale, g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// One Adam update of every parameter, then clear the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self
            .params
            .iter()
            .find(|(_, p)| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        for p in self.params.values_mut() {
            p.steps += 1;
            let t = p.steps as i32;
            let bias1 = 1.0 - cfg.beta1.powi(t);
            let bias2 = 1.0 - cfg.beta2.powi(t);
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.first_moment)
                .and(&mut p.second_moment)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                });
            p.grad.fill(0.0);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> ParamCheckpoint {
        let params = self
            .params
            .iter()
            .map(|(name, p)| {
                let (rows, cols) = p.value.dim();
                let entry = ParamEntry {
                    shape: [rows, cols],
                    values: p.value.iter().copied().collect(),
                };
                (name.clone(), entry)
            })
            .collect();
        ParamCheckpoint {
            format_version: CHECKPOINT_VERSION,
            params,
        }
    }

    pub fn from_checkpoint(ckpt: &ParamCheckpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(ckpt.format_version));
        }
        let mut store = Self::new();
        for (name, entry) in &ckpt.params {
            let [rows, cols] = entry.shape;
            let value = Array2::from_shape_vec((rows, cols), entry.values.clone()).map_err(|_| {
                Error::config(format!(
                    "parameter `{name}` has {} values for shape {rows}x{cols}",
                    entry.values.len()
                ))
            })?;
            store.insert(name.clone(), value);
        }
        Ok(store)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

/// Serialized parameter map: name → shape → row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckpoint {
    pub format_version: u32,
    pub params: BTreeMap<String, ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

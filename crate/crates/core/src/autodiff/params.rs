use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Tape, TensorId};

/// Named trainable tensors. A `BTreeMap` keeps iteration order
/// deterministic, which keeps whole runs bit-reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Debug, Clone)]
struct ParamEntry {
    value: Array2<f64>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                frozen: false,
            },
        );
    }

    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: (usize, usize),
        lo: f64,
        hi: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let value = Array2::from_shape_fn(shape, |_| rng.gen_range(lo..hi));
        self.insert(name, value);
    }

    /// Glorot-style uniform init: U(+-sqrt(6 / (fan_in + fan_out))).
    pub fn insert_glorot(
        &mut self,
        name: &str,
        shape: (usize, usize),
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert_uniform(name, shape, -bound, bound, rng);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: (usize, usize)) {
        self.insert(name, Array2::zeros(shape));
    }

    pub fn insert_full(&mut self, name: &str, shape: (usize, usize), v: f64) {
        self.insert(name, Array2::from_elem(shape, v));
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.frozen = frozen)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.frozen).unwrap_or(false)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) {
        self.entries.remove(name);
    }

    /// Names in deterministic (sorted) order.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>, bool)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.value, e.frozen))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Euclidean norm of every parameter, for NaN-abort diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect()
    }

    /// Put a parameter on a tape as a differentiable leaf and remember the
    /// mapping so gradients can be harvested after backward.
    pub fn lease(&self, tape: &mut Tape, name: &str, leases: &mut Leases) -> Result<TensorId> {
        let v = self.get(name)?;
        let id = tape.leaf(v.clone());
        leases.map.insert(name.to_string(), id);
        Ok(id)
    }
}

/// Mapping from parameter names to their tape ids for one forward pass.
#[derive(Debug, Default)]
pub struct Leases {
    map: BTreeMap<String, TensorId>,
}

impl Leases {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.map.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Accumulated gradients keyed by parameter name. Supports summing the
/// contributions of several sequences before one optimizer step.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Array2<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, g: &Array2<f64>) {
        match self.grads.get_mut(name) {
            Some(acc) => *acc += g,
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
    }

    /// Harvest gradients for every leased parameter out of a backward pass.
    pub fn harvest(&mut self, leases: &Leases, grads: &super::tape::Gradients) {
        for (name, id) in leases.iter() {
            if let Some(g) = grads.get(id) {
                self.accumulate(name, g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.grads.get(name)
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }
}

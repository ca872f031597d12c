use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use super::Real;
use crate::error::{Error, Result};

/// A named tensor in a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub value: ArrayD<T>,
    /// Buffers (running statistics) are stored alongside parameters but never
    /// receive gradients.
    pub trainable: bool,
}

/// Insertion-ordered named tensors: trainable weights plus non-trainable
/// buffers. Iteration order is stable, which keeps checkpoints and
/// optimizer state deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T> {
    entries: IndexMap<String, Entry<T>>,
}

/// Gradients keyed like the trainable entries of a [`ParameterSet`].
pub type Gradients<T> = IndexMap<String, ArrayD<T>>;

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet { entries: IndexMap::new() }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: ArrayD<T>) -> Result<()> {
        self.insert(name.into(), value, true)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: ArrayD<T>) -> Result<()> {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: ArrayD<T>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Entry { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k, &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable_scalars(&self) -> usize {
        self.trainable().map(|(_, v)| v.len()).sum()
    }

    /// Converts every entry to another float width.
    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        let entries = self
            .entries
            .iter()
            .map(|(k, e)| {
                let value = e.value.mapv(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or(U::zero()));
                (k.clone(), Entry { value, trainable: e.trainable })
            })
            .collect();
        ParameterSet { entries }
    }

    /// Zero-filled gradient map matching the trainable entries.
    pub fn zeros_like(&self) -> Gradients<T> {
        self.trainable()
            .map(|(k, v)| (k.to_string(), ArrayD::zeros(IxDyn(v.shape()))))
            .collect()
    }
}

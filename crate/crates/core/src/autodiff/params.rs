use super::real::Real;
use super::tensor::Tensor;
use crate::error::{ensure, Result};

/// Whether an entry is optimized or merely carried along (batch-norm running stats).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered collection of named tensors making up a model's state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Gradients aligned with the entries of a [`ParamStore`]; `None` for buffers.
pub type ParamGrads<T> = Vec<Option<Tensor<T>>>;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, kind, value });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.entries[idx].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.get(i))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    /// Named tensors in store order, e.g. for checkpointing.
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Replaces values from `named`, which must cover exactly this store's
    /// names with matching shapes.
    pub fn load_named(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        ensure!(
            named.len() == self.entries.len(),
            "checkpoint has {} tensors, model expects {}",
            named.len(),
            self.entries.len()
        );
        for (name, value) in named {
            let idx = self
                .index_of(&name)
                .ok_or_else(|| crate::Error::contract(format!("unknown parameter {name}")))?;
            ensure!(
                self.entries[idx].value.shape() == value.shape(),
                "parameter {name}: shape {:?} vs {:?}",
                value.shape(),
                self.entries[idx].value.shape()
            );
            self.entries[idx].value = value;
        }
        Ok(())
    }
}

//! Named parameter tensors, partitioned into frozen and trainable sets.
//!
//! Names carry the partition as a prefix: `frozen.` or `train.`. The prefix
//! is what the checkpoint format stores, so a loaded store reproduces the
//! partition exactly.

use std::collections::HashMap;

use crate::error::{Result, ScptError};
use crate::tensor::Matrix;

pub const FROZEN_PREFIX: &str = "frozen.";
pub const TRAIN_PREFIX: &str = "train.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
}

impl ParamEntry {
    pub fn trainable(&self) -> bool {
        self.name.starts_with(TRAIN_PREFIX)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. The name must start with `frozen.` or `train.` and be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if !(name.starts_with(FROZEN_PREFIX) || name.starts_with(TRAIN_PREFIX)) {
            return Err(ScptError::InvalidArgument(format!("parameter `{name}` lacks a frozen./train. prefix")));
        }
        if self.index.contains_key(&name) {
            return Err(ScptError::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| ScptError::CorruptFile(format!("missing parameter `{name}`")))
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let id = self.id(name)?;
        let got = self.entries[id.0].value.shape();
        if got != (rows, cols) {
            return Err(ScptError::shape(format!("parameter `{name}` is {got:?}, expected ({rows}, {cols})")));
        }
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.trainable()).map(|(id, _)| id).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| !e.trainable()).map(|(id, _)| id).collect()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable()).map(|e| e.value.len()).sum()
    }

    /// Copies every tensor whose name also exists in `other` (shapes must agree).
    pub fn overwrite_from(&mut self, other: &ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for e in &other.entries {
            if !filter(&e.name) {
                continue;
            }
            let id = self.id(&e.name)?;
            let slot = &mut self.entries[id.0].value;
            if slot.shape() != e.value.shape() {
                return Err(ScptError::shape(format!("`{}`: {:?} vs {:?}", e.name, slot.shape(), e.value.shape())));
            }
            *slot = e.value.clone();
            n += 1;
        }
        Ok(n)
    }
}

//! Flat parameter storage. Every tensor is a named slice of one buffer, so the
//! optimizer, the gradient checker and the checkpoint all see a single vector.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId {
    offset: usize,
    len: usize,
}

impl ParamId {
    #[inline]
    pub fn range(self) -> Range<usize> {
        self.offset..self.offset + self.len
    }

    #[inline]
    pub fn len(self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let offset = self.data.len();
        let entry = ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        };
        let len = entry.len();
        self.data.resize(offset + len, 0.0);
        self.entries.push(entry);
        ParamId { offset, len }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.range()]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.range()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    /// Symmetric uniform init in `[-bound, bound]`.
    pub fn init_uniform(&mut self, id: ParamId, bound: f64, rng: &mut SeededRng) {
        for v in self.get_mut(id) {
            *v = rng.gen_range(-bound..=bound);
        }
    }

    pub fn fill(&mut self, id: ParamId, value: f64) {
        for v in self.get_mut(id) {
            *v = value;
        }
    }

    /// True when `other` has the same tensor names, shapes and offsets.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries == other.entries && self.data.len() == other.data.len()
    }
}

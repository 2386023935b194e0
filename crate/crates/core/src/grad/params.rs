//! Named parameter tensors with gradient slots, freeze flags and AdamW state.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by AdamW.
    Trainable,
    /// Non-gradient state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub frozen: bool,
    /// AdamW first moment.
    pub m: Vec<T>,
    /// AdamW second moment.
    pub v: Vec<T>,
    /// Optimizer steps applied to this entry.
    pub t: u64,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable && !self.frozen
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<T>, kind: ParamKind) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        if value.len() != n {
            return Err(Error::Shape(format!("param {name}: shape {shape:?} needs {n} values, got {}", value.len())));
        }
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            kind,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            value,
            grad: None,
            frozen: false,
            t: 0,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freezes or unfreezes every entry whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = frozen;
        }
    }

    /// Clears gradients and opens a zero slot for every trainable, unfrozen entry.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = if e.is_trainable() { Some(vec![T::zero(); e.value.len()]) } else { None };
        }
    }

    /// `grad += scale * g`; gradients on frozen or buffer entries are dropped.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &[T], scale: T) -> Result<()> {
        let e = &mut self.entries[id.0];
        if g.len() != e.value.len() {
            return Err(Error::Shape(format!("gradient for {} has {} values, expected {}", e.name, g.len(), e.value.len())));
        }
        if !e.is_trainable() {
            return Ok(());
        }
        let slot = e.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (s, &x) in slot.iter_mut().zip(g) {
            *s += scale * x;
        }
        Ok(())
    }

    /// Converts every entry to another precision, keeping names, flags and state.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |xs: &[T]| xs.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    kind: e.kind,
                    value: conv(&e.value),
                    grad: e.grad.as_deref().map(conv),
                    frozen: e.frozen,
                    m: conv(&e.m),
                    v: conv(&e.v),
                    t: e.t,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

//! Named parameter storage with gradient and optimizer-moment buffers.

use super::array::{DenseArray, Element};
use crate::error::{CoreError, Result};
use std::collections::BTreeMap;

pub(crate) struct ParamEntry<T: Element> {
    pub(crate) value: DenseArray<T>,
    pub(crate) grad: Option<DenseArray<T>>,
    pub(crate) m: DenseArray<T>,
    pub(crate) v: DenseArray<T>,
}

/// All trainable parameters of one model component.
///
/// Gradient and moment buffers always mirror the parameter shapes; the step
/// counter advances by exactly one per optimizer step. Iteration order is
/// the sorted parameter name order, which makes training and serialization
/// deterministic.
pub struct ParamStore<T: Element = f32> {
    pub(crate) entries: BTreeMap<String, ParamEntry<T>>,
    step: u64,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: DenseArray<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CoreError::DuplicateParam(name.to_string()));
        }
        let m = DenseArray::zeros(value.shape());
        let v = DenseArray::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: None,
                m,
                v,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| CoreError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseArray<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| CoreError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<Option<&DenseArray<T>>> {
        self.entries
            .get(name)
            .map(|e| e.grad.as_ref())
            .ok_or_else(|| CoreError::UnknownParam(name.to_string()))
    }

    /// Add `delta` into the named parameter's gradient accumulator.
    pub fn accumulate_grad(&mut self, name: &str, delta: &DenseArray<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::UnknownParam(name.to_string()))?;
        if entry.value.shape() != delta.shape() {
            return Err(CoreError::shape(
                format!("grad[{name}]"),
                format!("param {:?} vs grad {:?}", entry.value.shape(), delta.shape()),
            ));
        }
        match &mut entry.grad {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi = *gi + *di;
                }
            }
            None => entry.grad = Some(delta.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad = None;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Names of parameters that currently have no gradient.
    pub fn missing_grads(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.grad.is_none())
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// True when both stores hold bit-identical parameter values.
    pub fn params_equal(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(name, e)| {
                other
                    .entries
                    .get(name)
                    .map(|o| o.value == e.value)
                    .unwrap_or(false)
            })
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, entry) in &self.entries {
            out.insert(name, entry.value.cast()).expect("fresh store");
        }
        out.step = self.step;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_lookup() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a.w", DenseArray::zeros(&[2, 3])).unwrap();
        assert_eq!(store.get("a.w").unwrap().shape(), &[2, 3]);
        assert!(matches!(
            store.get("nope"),
            Err(CoreError::UnknownParam(_))
        ));
        assert!(matches!(
            store.insert("a.w", DenseArray::zeros(&[1])),
            Err(CoreError::DuplicateParam(_))
        ));
    }

    #[test]
    fn grad_accumulation_checks_shape() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", DenseArray::zeros(&[2])).unwrap();
        let g = DenseArray::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        store.accumulate_grad("w", &g).unwrap();
        store.accumulate_grad("w", &g).unwrap();
        assert_eq!(store.grad("w").unwrap().unwrap().data(), &[2.0, 4.0]);
        let bad = DenseArray::zeros(&[3]);
        assert!(store.accumulate_grad("w", &bad).is_err());
    }

    #[test]
    fn missing_grads_lists_names() {
        let mut store = ParamStore::<f32>::new();
        store.insert("b", DenseArray::zeros(&[1])).unwrap();
        store.insert("a", DenseArray::zeros(&[1])).unwrap();
        store
            .accumulate_grad("a", &DenseArray::zeros(&[1]))
            .unwrap();
        assert_eq!(store.missing_grads(), vec!["b".to_string()]);
    }
}

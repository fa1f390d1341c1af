use std::collections::{BTreeMap, BTreeSet};

use crate::error::{NnError, Result};
use crate::tensor::{Real, Tensor};

/// Named parameter tensors plus the set of frozen name prefixes.
///
/// Names are dot-separated paths (`gtn.ref.conv0.w`). A frozen prefix `gtn`
/// covers `gtn` and `gtn.*` but not `gtn2.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<F> {
    entries: BTreeMap<String, Tensor<F>>,
    frozen: BTreeSet<String>,
}

impl<F> Default for ParameterStore<F> {
    fn default() -> Self {
        Self { entries: BTreeMap::new(), frozen: BTreeSet::new() }
    }
}

/// Whether `name` lies under `prefix` at a path-segment boundary.
pub fn under_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len()
            && name.starts_with(prefix)
            && name.as_bytes()[prefix.len()] == b'.')
}

impl<F: Real> ParameterStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::DuplicateParameter(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries.get(name).ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.insert(prefix.into());
    }

    pub fn unfreeze(&mut self, prefix: &str) {
        self.frozen.remove(prefix);
    }

    pub fn frozen_prefixes(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| under_prefix(name, p))
    }

    /// Copy of every entry under `prefix` (frozen prefixes are not carried).
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| under_prefix(k, prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            frozen: BTreeSet::new(),
        }
    }

    /// Moves every entry of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: Self) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v)?;
        }
        self.frozen.extend(other.frozen);
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParameterStore<G> {
        ParameterStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
        }
    }
}

/// Gradient per parameter name, as produced by a backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<F> {
    entries: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<F>) {
        self.entries.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Element-wise accumulation; names missing in `self` are adopted.
    pub fn accumulate(&mut self, other: &Gradients<F>) -> Result<()> {
        for (k, g) in &other.entries {
            match self.entries.get_mut(k) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(NnError::Shape(format!("gradient shape mismatch for `{k}`")));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    self.entries.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        for g in self.entries.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_prefix_respects_segments() {
        let mut s = ParameterStore::<f32>::new();
        s.freeze("gtn");
        assert!(s.is_frozen("gtn"));
        assert!(s.is_frozen("gtn.ref.conv0.w"));
        assert!(!s.is_frozen("gtn2.w"));
        assert!(!s.is_frozen("gpt.gtn.w"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(s.insert("a", Tensor::zeros(&[1])), Err(NnError::DuplicateParameter(_))));
    }
}

//! Named parameter registry.
//!
//! Names carry the ownership prefix used throughout checkpoints:
//! `base/...` for original encoder parameters, `adapter/...` for injected
//! adapters, and head prefixes such as `parse/`, `seqc/`, `mcc/`, `mlm/`.
//! Iteration order is sorted by name, which keeps every downstream artifact
//! (checkpoints, optimizer slots, diffs) deterministic.

use std::collections::BTreeMap;

use super::Tensor;

#[derive(Default)]
pub struct ParamRegistry {
    map: BTreeMap<String, Tensor>,
}

impl ParamRegistry {
    pub fn new() -> ParamRegistry {
        ParamRegistry::default()
    }

    /// Registers a tensor under `name`. Panics on duplicates: parameter
    /// naming is fully static in this codebase, so a collision is a bug.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Sorted `(name, tensor)` pairs whose name passes `pred`.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<(String, Tensor)> {
        self.map
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn zero_grads(&self) {
        for t in self.map.values() {
            t.zero_grad();
        }
    }

    /// Snapshot of every parameter's values, sorted by name.
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.map
            .iter()
            .map(|(n, t)| (n.clone(), t.shape(), t.data()))
            .collect()
    }

    /// Restores values captured by [`ParamRegistry::snapshot`]. Entries for
    /// unknown names are ignored; shapes of known names must match.
    pub fn restore(&self, snap: &[(String, Vec<usize>, Vec<f64>)]) -> super::Result<()> {
        for (name, shape, data) in snap {
            if let Some(t) = self.map.get(name) {
                debug_assert_eq!(&t.shape(), shape, "shape drift for `{name}`");
                t.assign(data.clone())?;
            }
        }
        Ok(())
    }
}

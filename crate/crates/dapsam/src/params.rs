//! Named, partitioned model parameters.
//!
//! Every forward-pass weight lives here exactly once, flagged frozen or
//! trainable. The partition rule is a pure function of the parameter name so
//! that initialization, checkpointing, and the optimizer all agree on it:
//! the encoder core is frozen; adapters, the low-level projection, the memory
//! bank, the prompt convolution, and the entire decoder train.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Parameter namespaces and their train/freeze classification.
///
/// Returns `None` for names outside every known namespace.
pub fn name_is_trainable(name: &str) -> Option<bool> {
    if name.starts_with("decoder.") || name.starts_with("prompt.") {
        return Some(true);
    }
    if name.starts_with("encoder.") {
        let trainable =
            name.starts_with("encoder.low_level_proj.") || name.contains(".adapter");
        return Some(trainable);
    }
    None
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter; the frozen flag comes from the namespace rule.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let trainable = name_is_trainable(name)
            .ok_or_else(|| Error::Inventory(format!("unknown parameter namespace: {name}")))?;
        if self.entries.contains_key(name) {
            return Err(Error::Inventory(format!("duplicate parameter name: {name}")));
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor,
                frozen: !trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Inventory(format!("missing parameter: {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn set_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Inventory(format!("missing parameter: {name}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch for parameter {name}: store has {:?}, got {:?}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = tensor;
        Ok(())
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

    /// Deterministic (sorted-name) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Split names into (frozen, trainable) lists, validating every name
    /// against the namespace rule.
    pub fn partition(&self) -> Result<(Vec<String>, Vec<String>)> {
        let mut frozen = Vec::new();
        let mut trainable = Vec::new();
        for (name, entry) in &self.entries {
            let rule = name_is_trainable(name)
                .ok_or_else(|| Error::Inventory(format!("unknown parameter namespace: {name}")))?;
            debug_assert_eq!(rule, !entry.frozen);
            if entry.frozen {
                frozen.push(name.clone());
            } else {
                trainable.push(name.clone());
            }
        }
        Ok((frozen, trainable))
    }

    /// Total element count of the trainable partition.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| !e.frozen)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Total element count of names matching a prefix filter.
    pub fn count_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }

    /// Clone of every trainable tensor, keyed by name (snapshot for tests).
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.tensor.clone()))
            .collect()
    }
}

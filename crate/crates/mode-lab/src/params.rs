//! Named parameter registry shared by the backbone, adapters, router and
//! classification head.
//!
//! Every tensor that can in principle receive a gradient lives here under a
//! stable string name and integer slot. The slot doubles as the gradient
//! index in [`GradBuf`](crate::tape::GradBuf), so a training step is:
//! build tapes referring to slots, backpropagate into one `GradBuf`, then
//! walk the trainable entries applying the optimizer update. Frozen entries
//! (`trainable == false`) are registered too so checkpoints capture the full
//! model, but the optimizer never touches them and the training loop audits
//! that their bytes stay fixed.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under `name`; returns its slot. Names must be unique.
    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name '{}'", name)));
        }
        let slot = self.params.len();
        self.params.push(Param { name: name.to_string(), value: Arc::new(value), trainable });
        self.index.insert(name.to_string(), slot);
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown parameter '{}'", name)))
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.params[slot].name
    }

    pub fn get(&self, slot: usize) -> &Arc<Tensor> {
        &self.params[slot].value
    }

    pub fn get_by_name(&self, name: &str) -> Result<&Arc<Tensor>> {
        Ok(self.get(self.slot(name)?))
    }

    pub fn is_trainable(&self, slot: usize) -> bool {
        self.params[slot].trainable
    }

    pub fn set_trainable(&mut self, slot: usize, trainable: bool) {
        self.params[slot].trainable = trainable;
    }

    /// Mutable access to a parameter's data (copy-on-write under the Arc).
    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[slot].value)
    }

    /// Replace a parameter's tensor, keeping its shape.
    pub fn set_value(&mut self, slot: usize, value: Tensor) -> Result<()> {
        if value.shape != self.params[slot].value.shape {
            return Err(Error::shape(
                "set_value",
                format!(
                    "parameter '{}' has shape {:?}, got {:?}",
                    self.params[slot].name, self.params[slot].value.shape, value.shape
                ),
            ));
        }
        self.params[slot].value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn trainable_slots(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Rebuild the name index (needed after deserialization).
    pub fn rebuild_index(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    /// Order-insensitive digest of the frozen parameters' exact bytes.
    /// Training steps compare this before/after to prove frozen weights
    /// never move.
    pub fn frozen_checksum(&self) -> u64 {
        // FNV-1a over name bytes and little-endian f64 bit patterns.
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in self.params.iter().filter(|p| !p.trainable) {
            mix(p.name.as_bytes());
            for &v in &p.value.data {
                mix(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut store = ParamStore::new();
        let a = store.register("w", Tensor::zeros(vec![2, 2]), true).unwrap();
        let b = store.register("b", Tensor::zeros(vec![1, 2]), false).unwrap();
        assert_eq!(store.slot("w").unwrap(), a);
        assert_eq!(store.slot("b").unwrap(), b);
        assert!(store.is_trainable(a));
        assert!(!store.is_trainable(b));
        assert_eq!(store.trainable_slots(), vec![a]);
        assert!(store.register("w", Tensor::zeros(vec![1, 1]), true).is_err());
    }

    #[test]
    fn frozen_checksum_tracks_frozen_only() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::zeros(vec![2, 2]), true).unwrap();
        let f = store.register("f", Tensor::row(vec![1.0, 2.0]), false).unwrap();
        let before = store.frozen_checksum();
        store.value_mut(w).data[0] = 7.0;
        assert_eq!(store.frozen_checksum(), before);
        store.value_mut(f).data[0] = 7.0;
        assert_ne!(store.frozen_checksum(), before);
    }

    #[test]
    fn set_value_shape_guard() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::zeros(vec![2, 2]), true).unwrap();
        assert!(store.set_value(w, Tensor::zeros(vec![1, 4])).is_err());
        assert!(store.set_value(w, Tensor::zeros(vec![2, 2])).is_ok());
    }
}

//! Named trainable tensors.

use super::{Tensor, TensorError};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Gradients keyed by parameter name, in name order.
pub type GradMap = BTreeMap<String, Tensor>;

/// Read-only view shared across inference workers. Tensor payloads are
/// reference counted, so taking a snapshot copies no data.
pub type ParamSnapshot = Arc<ParameterStore>;

/// Named, shaped, trainable tensors. Iteration order is always name order,
/// which keeps every gradient walk and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Panics with the missing name; model builders only ask for parameters
    /// they created, so a miss is a wiring bug.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
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

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        Arc::new(self.clone())
    }

    /// Round every parameter through `f32` storage precision.
    pub fn quantize_f32(&self) -> ParameterStore {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.quantize_f32()))
                .collect(),
        }
    }

    /// Check that `grads` covers exactly the stored parameters with matching
    /// shapes; the optimizer refuses misaligned updates.
    pub fn check_aligned(&self, grads: &GradMap) -> Result<(), TensorError> {
        for (name, value) in &self.entries {
            match grads.get(name) {
                None => {
                    return Err(TensorError::Invalid {
                        op: "check_aligned",
                        msg: format!("no gradient for parameter {name:?}"),
                    })
                }
                Some(g) if g.shape() != value.shape() => {
                    return Err(TensorError::ShapeMismatch {
                        op: "check_aligned",
                        lhs: value.shape(),
                        rhs: g.shape(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = grads.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(TensorError::Invalid {
                op: "check_aligned",
                msg: format!("gradient for unknown parameter {extra:?}"),
            });
        }
        Ok(())
    }
}

/// Sum `delta` into `into`, inserting zero-initialized slots as needed.
pub fn accumulate_grads(into: &mut GradMap, delta: &GradMap) -> Result<(), TensorError> {
    for (name, g) in delta {
        match into.get_mut(name) {
            Some(t) => t.add_assign(g)?,
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
    Ok(())
}

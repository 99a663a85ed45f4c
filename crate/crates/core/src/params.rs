//! Named parameter storage and per-forward graph binding.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Names under this prefix belong to the frozen backbone.
pub const FROZEN_PREFIX: &str = "encoder.backbone.";

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn trainable(value: Tensor) -> Self {
        Self {
            value,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        Self {
            value,
            trainable: false,
        }
    }
}

/// All model parameters, keyed and iterated in sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Param) {
        self.params.insert(name.into(), p);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// SHA-256 over the names and bit patterns of every frozen parameter.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| !p.trainable) {
            h.update(name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replace values from a loaded checkpoint; names and shapes must match exactly.
    pub fn load_values(&mut self, values: BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                values.len(),
                self.params.len()
            )));
        }
        for (name, v) in values {
            self.set_value(&name, v)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

/// Gaussian tensor with standard deviation `std`.
pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Lazily creates one graph leaf per parameter name for a single forward pass.
///
/// A parameter referenced several times (such as a shared projection) maps to
/// one leaf, so its gradient contributions accumulate.
pub struct Binder<'a> {
    pub g: &'a Graph,
    store: &'a ParamStore,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore) -> Self {
        Self {
            g,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let param = self
            .store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.g.leaf(param.value.clone(), param.trainable)?;
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every trainable parameter; unreached ones get zeros.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let bound = self.bound.borrow();
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let g = bound
                    .get(name)
                    .and_then(|v| grads.get(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

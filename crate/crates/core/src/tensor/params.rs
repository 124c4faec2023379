use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    MlHead,
    SegHead,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::MlHead => "ml_head",
            ParamGroup::SegHead => "seg_head",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    name: String,
    group: ParamGroup,
    pub tensor: Tensor<T>,
    pub(crate) moment1: Vec<T>,
    pub(crate) moment2: Vec<T>,
}

impl<T: Real> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Named parameter registry of one model.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
    frozen: bool,
    pub(crate) adam_steps: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
            frozen: self.frozen,
            adam_steps: self.adam_steps,
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
            frozen: false,
            adam_steps: 0,
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        tensor: Tensor<T>,
    ) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let numel = tensor.numel();
        self.params.push(Parameter {
            name: name.clone(),
            group,
            tensor: tensor.with_requires_grad(true),
            moment1: vec![T::zero(); numel],
            moment2: vec![T::zero(); numel],
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_elements_in(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Frozen stores bind on a tape as constants, so they receive no gradient.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Sets every gradient to an explicit zero buffer.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.set_grad(Some(vec![T::zero(); n])).expect("matching length");
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.set_grad(None).expect("clearing never fails");
        }
    }

    /// Number of optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.adam_steps
    }
}

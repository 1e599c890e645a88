use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Optimizer group a parameter belongs to; each group has its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PretrainReconstructor,
    Reconstructor,
    Predictor,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::PretrainReconstructor => "pretrain_reconstructor",
            ParamGroup::Reconstructor => "reconstructor",
            ParamGroup::Predictor => "predictor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain_reconstructor" => Some(ParamGroup::PretrainReconstructor),
            "reconstructor" => Some(ParamGroup::Reconstructor),
            "predictor" => Some(ParamGroup::Predictor),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Named parameter tensors, ordered by path so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invariant(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, Param { group, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| Error::Invariant(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::Invariant(format!("unknown parameter `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Sets every gradient buffer to zeros (allocating where absent).
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Drops every gradient buffer.
    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.set_grad(None).expect("clearing never fails");
        }
    }

    /// Total number of scalar parameters in `group`.
    pub fn count_in_group(&self, group: ParamGroup) -> usize {
        self.params.values().filter(|p| p.group == group).map(|p| p.tensor.len()).sum()
    }

    /// Values of every parameter whose path starts with `prefix`.
    pub fn snapshot_prefix(&self, prefix: &str) -> BTreeMap<String, Vec<T>> {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, p)| (k.clone(), p.tensor.values().to_vec())).collect()
    }
}

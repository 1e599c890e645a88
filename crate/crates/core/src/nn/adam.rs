use std::collections::BTreeMap;

use super::params::{ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam moments and hyperparameters.
///
/// Only parameters whose group has a learning rate are updated; the rest of
/// the store is left alone, which is how a training phase freezes a group.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    step: u64,
    lrs: BTreeMap<ParamGroup, T>,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lrs: &[(ParamGroup, T)]) -> Self {
        AdamState {
            moments: BTreeMap::new(),
            step: 0,
            lrs: lrs.iter().copied().collect(),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self, group: ParamGroup) -> Option<T> {
        self.lrs.get(&group).copied()
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update over every active parameter; gradients are
/// zeroed afterwards.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    for (name, p) in store.iter() {
        if state.lrs.contains_key(&p.group) && p.tensor.grad().is_none() {
            return Err(Error::Invariant(format!("parameter `{name}` has no gradient")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (name, p) in store.iter_mut() {
        let Some(&lr) = state.lrs.get(&p.group) else { continue };
        let n = p.tensor.len();
        let (m, v) = state.moments.entry(name.clone()).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        if m.len() != n {
            return Err(Error::Invariant(format!("moment shape drift for `{name}`")));
        }
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let values = p.tensor.values_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            values[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        p.tensor.zero_grad();
    }
    Ok(())
}

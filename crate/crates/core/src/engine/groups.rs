use rand::Rng;

use crate::cluster::argmax;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::reconstructor::{grouped_elbo, VaeExpert};
use crate::scalar::Scalar;

/// New (and replayed) nodes grouped by the previous task's best expert.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalizedGroups {
    pub node_ids: Vec<u64>,
    /// Per expert, indices into `node_ids`.
    pub groups: Vec<Vec<usize>>,
}

impl LocalizedGroups {
    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn expert_of(&self, node: u64) -> Option<usize> {
        let i = self.node_ids.iter().position(|&n| n == node)?;
        self.groups.iter().position(|g| g.contains(&i))
    }
}

/// Argmax of each evidence row (`[N, K]`), ties to the lowest expert index.
pub fn build_localized_groups<T: Scalar>(evidence: &Tensor<T>, node_ids: &[u64], k: usize) -> Result<LocalizedGroups> {
    let n = node_ids.len();
    if n > 0 && evidence.shape() != [n, k] {
        return Err(Error::Dimension(format!("evidence {:?} for {n} nodes and {k} experts", evidence.shape())));
    }
    let mut groups = vec![Vec::new(); k];
    for i in 0..n {
        groups[argmax(evidence.row(i))].push(i);
    }
    Ok(LocalizedGroups { node_ids: node_ids.to_vec(), groups })
}

/// `Σ_k Σ_{i∈groups[k]} ELBO_k(x_i)` as a differentiable scalar, zero when
/// every group is empty. `weeks[i]` is the week of `groups.node_ids[i]`.
pub fn consolidation_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    experts: &[VaeExpert],
    groups: &LocalizedGroups,
    weeks: &[Vec<T>],
    rng: &mut R,
) -> Result<Var> {
    if weeks.len() != groups.node_ids.len() {
        return Err(Error::Dimension(format!("{} weeks for {} grouped nodes", weeks.len(), groups.node_ids.len())));
    }
    match grouped_elbo(g, store, experts, &groups.groups, weeks, rng)? {
        Some((v, _)) => Ok(v),
        None => g.constant(Tensor::scalar(T::zero())),
    }
}

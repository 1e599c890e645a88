use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Pre-existing nodes least explained by the experts, worst first.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct ReplaySelection {
    pub nodes: Vec<u64>,
    /// Evidence summed over experts, non-decreasing.
    pub scores: Vec<f64>,
}

/// Sorts nodes ascending by their summed evidence row (ties by node id) and
/// keeps the first `n_r`. Requests beyond the node count are clamped.
pub fn reconstruction_based_replay<T: Scalar>(evidence: &Tensor<T>, node_ids: &[u64], n_r: usize) -> Result<ReplaySelection> {
    let n = node_ids.len();
    if n > 0 && (evidence.rank() != 2 || evidence.shape()[0] != n) {
        return Err(Error::Dimension(format!("evidence {:?} for {n} nodes", evidence.shape())));
    }
    if n_r > n {
        log::warn!("replay request {n_r} exceeds {n} pre-existing nodes; clamping");
    }
    let mut scored: Vec<(f64, u64)> = (0..n).map(|i| (evidence.row(i).iter().copied().sum::<T>().as_f64(), node_ids[i])).collect();
    scored.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.cmp(&b.1),
        o => o,
    });
    scored.truncate(n_r.min(n));
    Ok(ReplaySelection { nodes: scored.iter().map(|s| s.1).collect(), scores: scored.iter().map(|s| s.0).collect() })
}

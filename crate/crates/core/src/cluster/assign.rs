use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Student's t (one degree of freedom) assignment of `n` rows of `z` to `k`
/// centroids, both row-major with width `d`.
///
/// `q_ik = (1 + ‖z_i − μ_k‖²)⁻¹ / Σ_k' (1 + ‖z_i − μ_k'‖²)⁻¹`
pub fn student_t_assignments<T: Scalar>(z: &[T], mu: &[T], n: usize, k: usize, d: usize) -> Vec<T> {
    let mut q = Vec::with_capacity(n * k);
    for i in 0..n {
        let zi = &z[i * d..(i + 1) * d];
        let start = q.len();
        for c in 0..k {
            let dist: T = zi.iter().zip(&mu[c * d..(c + 1) * d]).map(|(&a, &b)| (a - b) * (a - b)).sum();
            q.push(T::one() / (T::one() + dist));
        }
        let total: T = q[start..].iter().copied().sum();
        q[start..].iter_mut().for_each(|v| *v /= total);
    }
    q
}

/// Soft cluster assignment matrix `[N, K]` of latents `[N, d]` to centroids `[K, d]`.
pub fn soft_assign<T: Scalar>(latents: &Tensor<T>, centroids: &Tensor<T>) -> Result<Tensor<T>> {
    let (ls, cs) = (latents.shape(), centroids.shape());
    if ls.len() != 2 || cs.len() != 2 || ls[1] != cs[1] {
        return Err(Error::Dimension(format!("latents {ls:?} vs centroids {cs:?}")));
    }
    let q = student_t_assignments(latents.values(), centroids.values(), ls[0], cs[0], ls[1]);
    Tensor::new(vec![ls[0], cs[0]], q)
}

/// Sharpened target `p_ik = (q_ik²/f_k) / Σ_k' (q_ik'²/f_k')` with `f_k = Σ_i q_ik`.
pub fn target_distribution<T: Scalar>(q: &Tensor<T>) -> Result<Tensor<T>> {
    if q.rank() != 2 {
        return Err(Error::Dimension("target_distribution expects [N, K]".into()));
    }
    let (n, k) = (q.shape()[0], q.shape()[1]);
    let mut f = vec![T::zero(); k];
    for row in q.values().chunks(k) {
        f.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    let mut p = Vec::with_capacity(n * k);
    for i in 0..n {
        let start = p.len();
        for (&v, &fc) in q.values()[i * k..(i + 1) * k].iter().zip(&f) {
            p.push(if fc > T::zero() { v * v / fc } else { T::zero() });
        }
        let total: T = p[start..].iter().copied().sum();
        p[start..].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(vec![n, k], p)
}

/// `Σ_i Σ_k p_ik ln(p_ik / q_ik)`
pub fn cluster_kl<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> T {
    p.values().iter().zip(q.values()).filter(|(&pv, _)| pv > T::zero()).map(|(&pv, &qv)| pv * (pv / qv).ln()).sum()
}

/// Hard cluster groups derived from a soft assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardGroups {
    /// Cluster of each row.
    pub assignment: Vec<usize>,
    /// Row indices per cluster, ascending.
    pub groups: Vec<Vec<usize>>,
}

impl HardGroups {
    pub fn empty_clusters(&self) -> Vec<usize> {
        self.groups.iter().enumerate().filter(|(_, g)| g.is_empty()).map(|(k, _)| k).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `c_i = argmax_k q_ik` (lowest index on ties) and the induced partition.
pub fn hard_assign<T: Scalar>(q: &Tensor<T>) -> HardGroups {
    let k = q.last_dim();
    let n = q.len().checked_div(k).unwrap_or(0);
    let assignment: Vec<usize> = (0..n).map(|i| argmax(q.row(i))).collect();
    let mut groups = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        groups[c].push(i);
    }
    let empty: Vec<usize> = groups.iter().enumerate().filter(|(_, g)| g.is_empty()).map(|(c, _)| c).collect();
    if !empty.is_empty() {
        log::warn!("hard assignment left clusters {empty:?} empty");
    }
    HardGroups { assignment, groups }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&v| c2(v)).sum();
    let rows: f64 = (0..ka).map(|i| c2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let expected = rows * cols / c2(n as u64);
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

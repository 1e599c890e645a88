//! Central finite-difference oracle for analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
    pub rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_err <= self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the scalar returned by `forward` against
/// central differences with step `h`, for every parameter in `store`.
pub fn finite_difference_check<T, F>(store: &ParamStore<T>, h: T, tol: f64, forward: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = forward(&mut g, store)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    g.backward(loss, &mut analytic_store)?;

    let eval = |s: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::new();
        let l = forward(&mut g, s)?;
        Ok(g.scalar(l))
    };

    let mut probe = store.clone();
    let mut entries = Vec::new();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let analytic = analytic_store.tensor(&name)?.grad().map(<[T]>::to_vec).unwrap_or_default();
        let n = store.tensor(&name)?.len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = probe.tensor(&name)?.values()[i];
            probe.get_mut(&name)?.tensor.values_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.tensor.values_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.tensor.values_mut()[i] = orig;
            numeric.push((up - down) / (h + h));
        }
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (a, nv) in analytic.iter().zip(&numeric) {
            let (a, nv) = (a.as_f64(), nv.as_f64());
            diff2 += (a - nv) * (a - nv);
            a2 += a * a;
            n2 += nv * nv;
            max_abs = max_abs.max((a - nv).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_err = if denom < 1e-10 { diff2.sqrt() } else { diff2.sqrt() / denom };
        entries.push(GradCheckEntry { name, rel_err, max_abs_err: max_abs });
    }
    Ok(GradCheckReport { entries, tol })
}

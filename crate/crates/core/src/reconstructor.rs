//! Per-expert variational reconstructors over week vectors.
//!
//! Each expert owns an encoder (shared trunk with mean and log-variance heads),
//! a decoder, and a learnable diagonal Gaussian prior. The single-sample ELBO
//! serves as the log-evidence score used for gating, group assignment and
//! replay ranking.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Graph, LinearLayer, Mlp, ParamGroup, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

pub const PRIOR_LOG_VAR_MIN: f64 = -20.0;
pub const PRIOR_LOG_VAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaeExpert {
    pub index: usize,
    pub trunk: Mlp,
    pub mean_head: LinearLayer,
    pub log_var_head: LinearLayer,
    pub decoder: Mlp,
    pub prior_mean: String,
    pub prior_log_var: String,
    pub week_len: usize,
    pub d_latent: usize,
}

/// Differentiable pieces of one ELBO evaluation, each summed over rows.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub elbo: Var,
    pub log_likelihood: Var,
    pub kl: Var,
}

impl VaeExpert {
    pub fn new(index: usize, week_len: usize, hidden: [usize; 2], d_latent: usize) -> Self {
        let p = format!("expert.{index}.rec");
        VaeExpert {
            index,
            trunk: Mlp::new(&format!("{p}.enc"), &[week_len, hidden[0], hidden[1]]),
            mean_head: LinearLayer::new(&format!("{p}.enc.mean"), hidden[1], d_latent),
            log_var_head: LinearLayer::new(&format!("{p}.enc.log_var"), hidden[1], d_latent),
            decoder: Mlp::new(&format!("{p}.dec"), &[d_latent, hidden[1], hidden[0], week_len]),
            prior_mean: format!("{p}.prior_mean"),
            prior_log_var: format!("{p}.prior_log_var"),
            week_len,
            d_latent,
        }
    }

    /// Random encoder/decoder weights; prior starts at `N(0, I)`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let grp = ParamGroup::Reconstructor;
        self.trunk.init(store, grp, rng)?;
        self.mean_head.init(store, grp, rng)?;
        self.log_var_head.init(store, grp, rng)?;
        self.decoder.init(store, grp, rng)?;
        store.insert(&self.prior_mean, grp, Tensor::zeros(&[self.d_latent]))?;
        store.insert(&self.prior_log_var, grp, Tensor::zeros(&[self.d_latent]))
    }

    /// Posterior mean and log-variance for every row of `x`.
    pub fn posterior<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(g, store, x)?;
        let h = g.relu(h)?;
        let mean = self.mean_head.forward(g, store, h)?;
        let log_var = self.log_var_head.forward(g, store, h)?;
        Ok((mean, log_var))
    }

    /// Decoder mean for latents `z`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        self.decoder.forward(g, store, z)
    }

    /// Single-sample ELBO over the rows of `x` (`[n, week]`) with fixed
    /// standard-normal `noise` (`[n, d_latent]`). The likelihood is a
    /// unit-variance Gaussian per dimension.
    pub fn elbo_terms<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &Tensor<T>, noise: &Tensor<T>) -> Result<ElboTerms> {
        self.check_input(x, noise)?;
        let n = x.shape()[0];
        let xv = g.constant(x.clone())?;
        let (mean, log_var) = self.posterior(g, store, xv)?;
        let z = g.reparameterize(mean, log_var, noise)?;
        let xhat = self.decode(g, store, z)?;
        let sq = g.sq_err_sum(xhat, x)?;
        let half_sq = g.scale(sq, T::of(-0.5))?;
        let log_norm = Tensor::scalar(T::of(-((n * self.week_len) as f64) * 0.5 * (2.0 * PI).ln()));
        let log_likelihood = g.add_const(half_sq, &log_norm)?;
        let pm = g.param(store, &self.prior_mean)?;
        let plv = g.param(store, &self.prior_log_var)?;
        let kl = g.gaussian_kl(mean, log_var, pm, plv)?;
        let neg_kl = g.scale(kl, -T::one())?;
        let elbo = g.add(log_likelihood, neg_kl)?;
        Ok(ElboTerms { elbo, log_likelihood, kl })
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>, noise: &Tensor<T>) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.week_len {
            return Err(Error::Dimension(format!("week input {:?} for expert of length {}", x.shape(), self.week_len)));
        }
        if noise.shape() != [x.shape()[0], self.d_latent] {
            return Err(Error::Dimension(format!("noise {:?} for {} rows", noise.shape(), x.shape()[0])));
        }
        Ok(())
    }

    /// Per-row ELBO values without recording gradients.
    pub fn elbo_rows<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, noise: &Tensor<T>) -> Result<Vec<f64>> {
        self.check_input(x, noise)?;
        let (n, len, d) = (x.shape()[0], self.week_len, self.d_latent);
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let (mean, log_var) = self.posterior(&mut g, store, xv)?;
        let z = g.reparameterize(mean, log_var, noise)?;
        let xhat = self.decode(&mut g, store, z)?;
        let (m, lv, xh) = (g.value(mean).values(), g.value(log_var).values(), g.value(xhat).values());
        let pm = store.tensor(&self.prior_mean)?.values();
        let plv = store.tensor(&self.prior_log_var)?.values();
        let log_norm = -(len as f64) * 0.5 * (2.0 * PI).ln();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let sq: f64 = (0..len).map(|j| (xh[i * len + j] - x.values()[i * len + j]).as_f64().powi(2)).sum();
            let mut kl = 0.0;
            for j in 0..d {
                let (a, b) = (m[i * d + j].as_f64(), lv[i * d + j].as_f64());
                let (c, e) = (pm[j].as_f64(), plv[j].as_f64());
                kl += (b - e).exp() + (c - a).powi(2) * (-e).exp() - 1.0 + e - b;
            }
            out.push(log_norm - 0.5 * sq - 0.5 * kl);
        }
        Ok(out)
    }
}

/// Summed ELBO of `x` under `expert` as a differentiable scalar.
pub fn vae_elbo<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, expert: &VaeExpert, x: &Tensor<T>, noise: &Tensor<T>) -> Result<Var> {
    Ok(expert.elbo_terms(g, store, x, noise)?.elbo)
}

/// Standard-normal draws `[rows, d]`.
pub fn normal_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, d: usize) -> Tensor<T> {
    let v = (0..rows * d).map(|_| T::of(StandardNormal.sample(rng))).collect();
    Tensor::new(vec![rows, d], v).expect("rows×d")
}

/// Fixed evaluation noise: one draw per key from its own stream of `seed`,
/// so a node's draw does not depend on which other nodes are scored.
pub fn evaluation_noise<T: Scalar>(keys: &[u64], d: usize, seed: u64) -> Tensor<T> {
    let mut v = Vec::with_capacity(keys.len() * d);
    for &k in keys {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        v.extend((0..d).map(|_| T::of(StandardNormal.sample(&mut rng))));
    }
    Tensor::new(vec![keys.len(), d], v).expect("keys×d")
}

/// ELBO of every row of `weeks` (`[N, week]`) under every expert: `[N, K]`.
/// The same `noise` row is used for a node across all experts.
pub fn evidence_matrix<T: Scalar>(store: &ParamStore<T>, experts: &[VaeExpert], weeks: &Tensor<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
    let n = weeks.shape().first().copied().unwrap_or(0);
    let k = experts.len();
    let mut out = vec![T::zero(); n * k];
    if n == 0 {
        return Tensor::new(vec![0, k], out);
    }
    for (c, e) in experts.iter().enumerate() {
        let rows = e.elbo_rows(store, weeks, noise)?;
        for (i, v) in rows.into_iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("evidence of row {i} under expert {c}")));
            }
            out[i * k + c] = T::of(v);
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Keeps every prior log-variance within `[−20, 20]`.
pub fn clamp_priors<T: Scalar>(store: &mut ParamStore<T>, experts: &[VaeExpert]) -> Result<()> {
    for e in experts {
        let t = &mut store.get_mut(&e.prior_log_var)?.tensor;
        for v in t.values_mut() {
            *v = v.max(T::of(PRIOR_LOG_VAR_MIN)).min(T::of(PRIOR_LOG_VAR_MAX));
        }
    }
    Ok(())
}

/// Differentiable `Σ_k Σ_{i∈groups[k]} ELBO_k(x_i)` with fresh noise from `rng`.
/// Returns `None` when every group is empty.
pub fn grouped_elbo<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    experts: &[VaeExpert],
    groups: &[Vec<usize>],
    weeks: &[Vec<T>],
    rng: &mut R,
) -> Result<Option<(Var, usize)>> {
    if groups.len() != experts.len() {
        return Err(Error::Dimension(format!("{} groups for {} experts", groups.len(), experts.len())));
    }
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (e, members) in experts.iter().zip(groups) {
        if members.is_empty() {
            continue;
        }
        let rows: Vec<Vec<T>> = members.iter().map(|&i| weeks[i].clone()).collect();
        let x = Tensor::from_rows(&rows)?;
        let noise = normal_noise(rng, members.len(), e.d_latent);
        let elbo = vae_elbo(g, store, e, &x, &noise)?;
        total = Some(match total {
            Some(t) => g.add(t, elbo)?,
            None => elbo,
        });
        count += members.len();
    }
    Ok(total.map(|t| (t, count)))
}

/// Maximizes the grouped ELBO with Adam at learning rate `lr` on the
/// reconstructor group. Empty groups leave their expert untouched.
/// Returns the mean per-node ELBO before each step.
pub fn train_group_reconstructors<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    experts: &[VaeExpert],
    groups: &[Vec<usize>],
    weeks: &[Vec<T>],
    epochs: usize,
    lr: T,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if let Some(bad) = groups.iter().flatten().find(|&&i| i >= weeks.len()) {
        return Err(Error::Dimension(format!("group member {bad} outside {} weeks", weeks.len())));
    }
    let mut adam = AdamState::new(&[(ParamGroup::Reconstructor, lr)]);
    let mut curve = Vec::with_capacity(epochs);
    let mut last = f64::NAN;
    for _ in 0..epochs {
        let mut g = Graph::new();
        let Some((elbo, count)) = grouped_elbo(&mut g, store, experts, groups, weeks, rng)? else {
            break;
        };
        let loss = g.scale(elbo, -T::one())?;
        let mean = g.scalar(elbo).as_f64() / count as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { stage: "reconstructor".into(), last_finite_loss: last });
        }
        last = -mean;
        curve.push(mean);
        store.zero_grads();
        g.backward(loss, store)?;
        adam_step(store, &mut adam)?;
        clamp_priors(store, experts)?;
    }
    Ok(curve)
}

/// `count` week vectors decoded from prior draws `z ~ N(μ_k, diag(exp(logσ²_k)))`.
pub fn sample_prior<T: Scalar, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    expert: &VaeExpert,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let d = expert.d_latent;
    let pm = store.tensor(&expert.prior_mean)?.values().to_vec();
    let plv = store.tensor(&expert.prior_log_var)?.values().to_vec();
    let noise: Tensor<T> = normal_noise(rng, count, d);
    let mut z = Vec::with_capacity(count * d);
    for i in 0..count {
        for j in 0..d {
            let lv = plv[j].max(T::of(PRIOR_LOG_VAR_MIN)).min(T::of(PRIOR_LOG_VAR_MAX));
            z.push(pm[j] + (T::of(0.5) * lv).exp() * noise.values()[i * d + j]);
        }
    }
    let mut g = Graph::new();
    let zv = g.constant(Tensor::new(vec![count, d], z)?)?;
    let x = expert.decode(&mut g, store, zv)?;
    let out = g.value(x);
    Ok((0..count).map(|i| out.row(i).to_vec()).collect())
}

/// Convenience wrapper seeding [`sample_prior`] from `seed`.
pub fn sample_prior_seeded<T: Scalar>(store: &ParamStore<T>, expert: &VaeExpert, count: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    sample_prior(store, expert, count, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn expert(store: &mut ParamStore<f64>, index: usize, len: usize, hidden: [usize; 2], d: usize, seed: u64) -> VaeExpert {
        let e = VaeExpert::new(index, len, hidden, d);
        e.init(store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (name, p) in store.iter_mut() {
            if name.ends_with(".bias") {
                p.tensor.values_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i as f64 + 1.0).sin());
            }
        }
        e
    }

    /// Plain-loop forward of one layer stack, ReLU between layers.
    fn mlp_ref(store: &ParamStore<f64>, layers: &[LinearLayer], x: &[f64], relu_last: bool) -> Vec<f64> {
        let mut h = x.to_vec();
        for (li, l) in layers.iter().enumerate() {
            let w = store.tensor(&l.weight).unwrap().values();
            let b = store.tensor(&l.bias).unwrap().values();
            h = (0..l.d_out).map(|j| b[j] + (0..l.d_in).map(|i| h[i] * w[i * l.d_out + j]).sum::<f64>()).collect();
            if li + 1 < layers.len() || relu_last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    #[test]
    fn zero_residual_at_the_prior_is_the_normaliser() {
        let mut store = ParamStore::new();
        let e = expert(&mut store, 0, 6, [4, 3], 2, 1);
        for (_, p) in store.iter_mut() {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::zeros(&[1, 6]);
        let noise = Tensor::new(vec![1, 2], vec![0.3, -1.2]).unwrap();
        let mut g = Graph::new();
        let t = e.elbo_terms(&mut g, &store, &x, &noise).unwrap();
        assert_abs_diff_eq!(g.scalar(t.elbo), -3.0 * (2.0 * PI).ln(), epsilon = 1e-12);
        assert_eq!(g.scalar(t.kl), 0.0);
    }

    #[test]
    fn toy_vae_matches_hand_evaluation() {
        let mut store = ParamStore::new();
        let e = expert(&mut store, 0, 2, [3, 2], 1, 7);
        store.get_mut(&e.prior_mean).unwrap().tensor.values_mut()[0] = 0.4;
        store.get_mut(&e.prior_log_var).unwrap().tensor.values_mut()[0] = -0.3;
        let xs = [0.7, -1.1];
        let eps = 0.6;
        let h = mlp_ref(&store, &e.trunk.layers, &xs, true);
        let m = mlp_ref(&store, std::slice::from_ref(&e.mean_head), &h, false)[0];
        let lv = mlp_ref(&store, std::slice::from_ref(&e.log_var_head), &h, false)[0];
        let z = m + (0.5 * lv).exp() * eps;
        let xh = mlp_ref(&store, &e.decoder.layers, &[z], false);
        let ll = -0.5 * ((xh[0] - xs[0]).powi(2) + (xh[1] - xs[1]).powi(2)) - (2.0 * PI).ln();
        let (pm, plv): (f64, f64) = (0.4, -0.3);
        let kl = 0.5 * ((lv - plv).exp() + (m - pm).powi(2) / plv.exp() - 1.0 + plv - lv);

        let x = Tensor::new(vec![1, 2], xs.to_vec()).unwrap();
        let noise = Tensor::new(vec![1, 1], vec![eps]).unwrap();
        let mut g = Graph::new();
        let t = e.elbo_terms(&mut g, &store, &x, &noise).unwrap();
        assert_abs_diff_eq!(g.scalar(t.log_likelihood), ll, epsilon = 1e-12);
        assert_abs_diff_eq!(g.scalar(t.kl), kl, epsilon = 1e-12);
        assert_abs_diff_eq!(g.scalar(t.elbo), ll - kl, epsilon = 1e-12);
        assert_abs_diff_eq!(e.elbo_rows(&store, &x, &noise).unwrap()[0], ll - kl, epsilon = 1e-12);
    }

    #[test]
    fn kl_term_is_non_negative() {
        let mut store = ParamStore::new();
        let e = expert(&mut store, 0, 5, [4, 3], 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = normal_noise(&mut rng, 4, 5);
            let noise = normal_noise(&mut rng, 4, 3);
            let mut g = Graph::new();
            let t = e.elbo_terms(&mut g, &store, &x, &noise).unwrap();
            assert!(g.scalar(t.kl) >= -1e-9);
        }
    }

    #[test]
    fn bad_shapes_are_dimension_errors() {
        let mut store = ParamStore::new();
        let e = expert(&mut store, 0, 5, [4, 3], 3, 2);
        let mut g = Graph::new();
        assert!(matches!(e.elbo_terms(&mut g, &store, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 3])), Err(Error::Dimension(_))));
        assert!(matches!(e.elbo_terms(&mut g, &store, &Tensor::zeros(&[2, 5]), &Tensor::zeros(&[1, 3])), Err(Error::Dimension(_))));
    }

    #[test]
    fn overfits_one_node() {
        let mut store = ParamStore::new();
        let e = expert(&mut store, 0, 14, [32, 16], 2, 3);
        let week: Vec<f64> = (0..14).map(|i| (i as f64 * 0.9).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        train_group_reconstructors(&mut store, std::slice::from_ref(&e), &[vec![0]], std::slice::from_ref(&week), 1500, 1e-2, &mut rng)
            .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(std::slice::from_ref(&week)).unwrap()).unwrap();
        let (mean, _) = e.posterior(&mut g, &store, x).unwrap();
        let xh = e.decode(&mut g, &store, mean).unwrap();
        let err: f64 = g.value(xh).values().iter().zip(&week).map(|(a, b)| (a - b).abs()).sum::<f64>() / 14.0;
        assert!(err < 0.1, "per-dim error {err}");
    }

    #[test]
    fn empty_group_leaves_expert_alone() {
        let mut store = ParamStore::new();
        let experts = [expert(&mut store, 0, 6, [4, 3], 2, 5), expert(&mut store, 1, 6, [4, 3], 2, 6)];
        let before = store.snapshot_prefix("expert.1.");
        let weeks = vec![vec![0.5; 6], vec![-0.5; 6]];
        let curve =
            train_group_reconstructors(&mut store, &experts, &[vec![0, 1], vec![]], &weeks, 5, 1e-3, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert_eq!(curve.len(), 5);
        assert_eq!(store.snapshot_prefix("expert.1."), before);
        assert_ne!(store.snapshot_prefix("expert.0."), before);
        assert!(train_group_reconstructors(&mut store, &experts, &[vec![], vec![]], &weeks, 5, 1e-3, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .is_empty());
        assert!(train_group_reconstructors(&mut store, &experts, &[vec![7], vec![]], &weeks, 5, 1e-3, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn training_curve_rises_after_smoothing() {
        let mut store = ParamStore::new();
        let e = expert(&mut store, 0, 14, [16, 8], 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weeks: Vec<Vec<f64>> = (0..12).map(|n| (0..14).map(|i| ((i + n % 3) as f64 * 0.7).sin()).collect()).collect();
        let curve =
            train_group_reconstructors(&mut store, std::slice::from_ref(&e), &[(0..12).collect()], &weeks, 200, 1e-3, &mut rng).unwrap();
        // single-sample noise: the difference of two 5-epoch block means may
        // dip by up to two of its standard errors
        let diffs: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).collect();
        let md = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - md).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        let tol = 2.0 * sd / 5f64.sqrt();
        let smooth: Vec<f64> = curve.chunks(5).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        for w in smooth.windows(2) {
            assert!(w[1] >= w[0] - tol, "tol {tol}: {smooth:?}");
        }
        assert!(smooth[smooth.len() - 1] > smooth[0] + 2.0);
    }

    #[test]
    fn identical_experts_give_identical_columns() {
        let mut store = ParamStore::new();
        let a = expert(&mut store, 0, 6, [4, 3], 2, 10);
        let b = expert(&mut store, 1, 6, [4, 3], 2, 11);
        for (name, vals) in store.snapshot_prefix("expert.0.") {
            let twin = name.replacen("expert.0.", "expert.1.", 1);
            store.get_mut(&twin).unwrap().tensor.values_mut().copy_from_slice(&vals);
        }
        let weeks = normal_noise(&mut ChaCha8Rng::seed_from_u64(3), 4, 6);
        let noise = evaluation_noise(&[10, 11, 12, 13], 2, 5);
        let ev = evidence_matrix(&store, &[a.clone(), b.clone()], &weeks, &noise).unwrap();
        for i in 0..4 {
            assert_eq!(ev.row(i)[0], ev.row(i)[1]);
        }
        assert_eq!(ev, evidence_matrix(&store, &[a, b], &weeks, &noise).unwrap());
    }

    #[test]
    fn evidence_ignores_expert_order() {
        let mut store = ParamStore::new();
        let a = expert(&mut store, 0, 6, [4, 3], 2, 12);
        let b = expert(&mut store, 1, 6, [4, 3], 2, 13);
        let weeks = normal_noise(&mut ChaCha8Rng::seed_from_u64(3), 3, 6);
        let noise = evaluation_noise(&[1, 2, 3], 2, 5);
        let ab = evidence_matrix(&store, &[a.clone(), b.clone()], &weeks, &noise).unwrap();
        let ba = evidence_matrix(&store, &[b, a], &weeks, &noise).unwrap();
        for i in 0..3 {
            assert_eq!(ab.row(i)[0], ba.row(i)[1]);
            assert_eq!(ab.row(i)[1], ba.row(i)[0]);
        }
    }

    #[test]
    fn evaluation_noise_depends_only_on_the_key() {
        let both: Tensor<f64> = evaluation_noise(&[4, 9], 3, 1);
        let one: Tensor<f64> = evaluation_noise(&[9], 3, 1);
        assert_eq!(both.row(1), one.row(0));
        assert_ne!(both.row(0), both.row(1));
    }

    #[test]
    fn collapsed_prior_samples_decode_the_mean() {
        let mut store = ParamStore::new();
        let e = expert(&mut store, 0, 6, [4, 3], 2, 14);
        store.get_mut(&e.prior_log_var).unwrap().tensor.values_mut().iter_mut().for_each(|v| *v = -1e3);
        store.get_mut(&e.prior_mean).unwrap().tensor.values_mut().copy_from_slice(&[0.3, -0.2]);
        let draws = sample_prior_seeded(&store, &e, 5, 2).unwrap();
        let centre = mlp_ref(&store, &e.decoder.layers, &[0.3, -0.2], false);
        for d in &draws {
            for (a, b) in d.iter().zip(&centre) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-3);
            }
        }
        assert!(sample_prior_seeded(&store, &e, 0, 2).unwrap().is_empty());
        assert_eq!(draws, sample_prior_seeded(&store, &e, 5, 2).unwrap());
    }

    #[test]
    fn clamp_bounds_prior_log_variance() {
        let mut store = ParamStore::new();
        let e = expert(&mut store, 0, 6, [4, 3], 2, 15);
        store.get_mut(&e.prior_log_var).unwrap().tensor.values_mut().copy_from_slice(&[-50.0, 30.0]);
        clamp_priors(&mut store, std::slice::from_ref(&e)).unwrap();
        assert_eq!(store.tensor(&e.prior_log_var).unwrap().values(), [PRIOR_LOG_VAR_MIN, PRIOR_LOG_VAR_MAX]);
    }
}

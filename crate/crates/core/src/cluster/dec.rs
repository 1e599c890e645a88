//! Feature-extractor autoencoder and deep embedded clustering refinement.

use rand::Rng;

use super::assign::{cluster_kl, hard_assign, soft_assign, target_distribution, HardGroups};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Graph, Mlp, ParamGroup, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

pub const CENTROIDS_PARAM: &str = "pretrain.centroids";

/// Three-layer encoder and mirrored three-layer decoder over week vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainAutoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl PretrainAutoencoder {
    /// `hidden` are the two intermediate widths, e.g. `[128, 64]`.
    pub fn new(week_len: usize, hidden: [usize; 2], d_latent: usize) -> Self {
        PretrainAutoencoder {
            encoder: Mlp::new("pretrain.enc", &[week_len, hidden[0], hidden[1], d_latent]),
            decoder: Mlp::new("pretrain.dec", &[d_latent, hidden[1], hidden[0], week_len]),
        }
    }

    pub fn week_len(&self) -> usize {
        self.encoder.d_in()
    }

    pub fn d_latent(&self) -> usize {
        self.encoder.d_out()
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.encoder.init(store, ParamGroup::PretrainReconstructor, rng)?;
        self.decoder.init(store, ParamGroup::PretrainReconstructor, rng)
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.encoder.forward(g, store, x)
    }

    /// `L_recon = (1/N) Σ_i ‖x_i − x̂_i‖₁`, also returning the latent node.
    pub fn recon_loss<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, weeks: &Tensor<T>) -> Result<(Var, Var)> {
        let x = g.constant(weeks.clone())?;
        let z = self.encode(g, store, x)?;
        let xhat = self.decoder.forward(g, store, z)?;
        let s = g.abs_err_sum(xhat, weeks)?;
        let n = weeks.shape()[0].max(1);
        let loss = g.scale(s, T::one() / T::of(n as f64))?;
        Ok((loss, z))
    }
}

fn check_weeks<T: Scalar>(model: &PretrainAutoencoder, weeks: &Tensor<T>) -> Result<()> {
    if weeks.rank() != 2 || weeks.shape()[1] != model.week_len() {
        return Err(Error::Dimension(format!("week matrix {:?} does not match autoencoder input {}", weeks.shape(), model.week_len())));
    }
    Ok(())
}

fn diverged(stage: &str, last: f64) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite(_) => Error::Divergence { stage: stage.to_string(), last_finite_loss: last },
        e => e,
    }
}

/// Full-batch Adam on the reconstruction loss. Returns the loss before each step.
pub fn pretrain_autoencoder<T: Scalar>(
    store: &mut ParamStore<T>,
    model: &PretrainAutoencoder,
    weeks: &Tensor<T>,
    epochs: usize,
    lr: T,
) -> Result<Vec<f64>> {
    check_weeks(model, weeks)?;
    let mut adam = AdamState::new(&[(ParamGroup::PretrainReconstructor, lr)]);
    let mut losses = Vec::with_capacity(epochs);
    let mut last = f64::NAN;
    for _ in 0..epochs {
        store.zero_grads();
        let mut g = Graph::new();
        let (loss, _) = model.recon_loss(&mut g, store, weeks).map_err(diverged("pretrain", last))?;
        last = g.scalar(loss).as_f64();
        losses.push(last);
        g.backward(loss, store).map_err(diverged("pretrain", last))?;
        adam_step(store, &mut adam)?;
    }
    Ok(losses)
}

/// Deterministic encoder pass: `[N, week] → [N, d_latent]`.
pub fn encode_latents<T: Scalar>(store: &ParamStore<T>, model: &PretrainAutoencoder, weeks: &Tensor<T>) -> Result<Tensor<T>> {
    check_weeks(model, weeks)?;
    let mut g = Graph::new();
    let x = g.constant(weeks.clone())?;
    let z = model.encode(&mut g, store, x)?;
    Ok(g.value(z).clone())
}

/// Output of the clustering stage.
#[derive(Clone, Debug)]
pub struct ClusterState<T> {
    /// `[K, d_latent]`
    pub centroids: Tensor<T>,
    /// `[N, K]`
    pub q: Tensor<T>,
    /// `[N, K]`
    pub p: Tensor<T>,
    pub groups: HardGroups,
    pub alpha: T,
}

/// Per-epoch record of the clustering stage.
#[derive(Clone, Debug, Default)]
pub struct DecTrace {
    pub total: Vec<f64>,
    pub recon: Vec<f64>,
    pub cluster: Vec<f64>,
}

/// Jointly optimizes `L_recon + α·KL(P ‖ Q)` over the autoencoder and the
/// centroids (stored under [`CENTROIDS_PARAM`]). `P` is refreshed at the start
/// of every epoch; each epoch is one full-batch Adam step.
pub fn dec_train<T: Scalar>(
    store: &mut ParamStore<T>,
    model: &PretrainAutoencoder,
    weeks: &Tensor<T>,
    alpha: T,
    epochs: usize,
    lr: T,
) -> Result<(ClusterState<T>, DecTrace)> {
    check_weeks(model, weeks)?;
    if !store.contains(CENTROIDS_PARAM) {
        return Err(Error::State("centroids must be initialised before clustering refinement".into()));
    }
    let mut adam = AdamState::new(&[(ParamGroup::PretrainReconstructor, lr)]);
    let mut trace = DecTrace::default();
    let mut last = f64::NAN;
    for _ in 0..epochs {
        let latents = encode_latents(store, model, weeks)?;
        let q = soft_assign(&latents, store.tensor(CENTROIDS_PARAM)?)?;
        let p = target_distribution(&q)?;

        store.zero_grads();
        let mut g = Graph::new();
        let step = |g: &mut Graph<T>, store: &ParamStore<T>| -> Result<(Var, Var, Var)> {
            let (recon, z) = model.recon_loss(g, store, weeks)?;
            let mu = g.param(store, CENTROIDS_PARAM)?;
            let qv = g.soft_assign(z, mu)?;
            let kl = g.kl_from_target(qv, &p)?;
            let weighted = g.scale(kl, alpha)?;
            Ok((g.add(recon, weighted)?, recon, kl))
        };
        let (loss, recon, kl) = step(&mut g, store).map_err(diverged("clustering", last))?;
        last = g.scalar(loss).as_f64();
        trace.total.push(last);
        trace.recon.push(g.scalar(recon).as_f64());
        trace.cluster.push(g.scalar(kl).as_f64());
        g.backward(loss, store).map_err(diverged("clustering", last))?;
        adam_step(store, &mut adam)?;
    }
    let latents = encode_latents(store, model, weeks)?;
    let centroids = store.tensor(CENTROIDS_PARAM)?.clone();
    let q = soft_assign(&latents, &centroids)?;
    let p = target_distribution(&q)?;
    debug_assert!(cluster_kl(&p, &q) >= T::of(-1e-12));
    let groups = hard_assign(&q);
    let mut centroids = centroids;
    centroids.set_grad(None)?;
    Ok((ClusterState { centroids, q, p, groups, alpha }, trace))
}

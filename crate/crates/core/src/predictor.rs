//! Per-expert forecasters with a learned, input-dependent adjacency, plus the
//! reconstruction-based gate that mixes them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{glorot, Graph, LinearLayer, ParamGroup, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

pub const TEMPORAL_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictorExpert {
    pub index: usize,
    pub embed: LinearLayer,
    pub pair: LinearLayer,
    pub lambda: String,
    pub conv1_kernel: String,
    pub conv1_bias: String,
    pub conv2_kernel: String,
    pub conv2_bias: String,
    pub input_steps: usize,
    pub output_steps: usize,
    pub d_embed: usize,
    pub diffusion_steps: usize,
}

/// Whether the adjacency sampler perturbs logits with Gumbel noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Train,
    Eval,
}

/// Row-stochastic adjacency for each sample of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedAdjacency<T> {
    pub node_ids: Vec<u64>,
    pub weights: Tensor<T>,
}

/// Mixture weights per node, `[N, K]`, rows summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingWeights<T> {
    pub node_ids: Vec<u64>,
    pub weights: Tensor<T>,
}

impl PredictorExpert {
    pub fn new(index: usize, input_steps: usize, output_steps: usize, d_embed: usize, diffusion_steps: usize) -> Self {
        let p = format!("expert.{index}.pred");
        PredictorExpert {
            index,
            embed: LinearLayer::new(&format!("{p}.embed"), input_steps, d_embed),
            pair: LinearLayer::new(&format!("{p}.pair"), 2 * d_embed, 1),
            lambda: format!("{p}.diffusion"),
            conv1_kernel: format!("{p}.tconv1.kernel"),
            conv1_bias: format!("{p}.tconv1.bias"),
            conv2_kernel: format!("{p}.tconv2.kernel"),
            conv2_bias: format!("{p}.tconv2.bias"),
            input_steps,
            output_steps,
            d_embed,
            diffusion_steps,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        if self.input_steps != self.output_steps {
            return Err(Error::Config(format!("temporal head keeps length: input {} != output {}", self.input_steps, self.output_steps)));
        }
        let grp = ParamGroup::Predictor;
        let (d, m, k) = (self.d_embed, self.diffusion_steps, TEMPORAL_KERNEL);
        self.embed.init(store, grp, rng)?;
        self.pair.init(store, grp, rng)?;
        store.insert(&self.lambda, grp, glorot(rng, &[d, 1, m, 2], 2 * m, d))?;
        store.insert(&self.conv1_kernel, grp, glorot(rng, &[d, d, k], d * k, d * k))?;
        store.insert(&self.conv1_bias, grp, Tensor::zeros(&[d]))?;
        store.insert(&self.conv2_kernel, grp, glorot(rng, &[1, d, k], d * k, k))?;
        store.insert(&self.conv2_bias, grp, Tensor::zeros(&[1]))
    }

    /// `softmax(L_w([e_i ; e_j]) + gumbel)` over `j`, with `e = L_e(x)`.
    /// `x` is `[B, N, T′]`; `gumbel`, when given, is `[B, N, N]`.
    pub fn adjacency<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, gumbel: Option<&Tensor<T>>) -> Result<Var> {
        let (b, n) = self.batch_dims(g, x)?;
        let e = self.embed.forward(g, store, x)?;
        let w = g.param(store, &self.pair.weight)?;
        let bias = g.param(store, &self.pair.bias)?;
        let mut logits = g.pair_scores(e, w, bias)?;
        if let Some(noise) = gumbel {
            if noise.shape() != [b, n, n] {
                return Err(Error::Dimension(format!("gumbel noise {:?} for [{b}, {n}, {n}]", noise.shape())));
            }
            logits = g.add_const(logits, noise)?;
        }
        g.softmax_rows(logits)
    }

    /// Diffusion convolution over `a` followed by a two-layer temporal
    /// convolution: `[B, N, T′] → [B, N, T]`.
    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, a: Var, x: Var) -> Result<Var> {
        let (b, n) = self.batch_dims(g, x)?;
        let (t, d) = (self.input_steps, self.d_embed);
        let pad = TEMPORAL_KERNEL / 2;
        let xs = g.reshape(x, &[b, n, t, 1])?;
        let lambda = g.param(store, &self.lambda)?;
        let h = g.diffusion_conv(a, xs, lambda)?;
        let h = g.relu(h)?;
        let h = g.reshape(h, &[b * n, t, d])?;
        let h = g.swap_last_axes(h)?;
        let k1 = g.param(store, &self.conv1_kernel)?;
        let b1 = g.param(store, &self.conv1_bias)?;
        let h = g.pad_last(h, pad, pad)?;
        let h = g.conv1d(h, k1, Some(b1))?;
        let h = g.relu(h)?;
        let k2 = g.param(store, &self.conv2_kernel)?;
        let b2 = g.param(store, &self.conv2_bias)?;
        let h = g.pad_last(h, pad, pad)?;
        let y = g.conv1d(h, k2, Some(b2))?;
        g.reshape(y, &[b, n, self.output_steps])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, gumbel: Option<&Tensor<T>>) -> Result<Var> {
        let a = self.adjacency(g, store, x, gumbel)?;
        self.predict(g, store, a, x)
    }

    fn batch_dims<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<(usize, usize)> {
        match g.value(x).shape() {
            [b, n, t] if *t == self.input_steps && *n > 0 => Ok((*b, *n)),
            s => Err(Error::Dimension(format!("predictor input {s:?}, expected [B, N, {}]", self.input_steps))),
        }
    }
}

/// `−ln(−ln u)`
fn gumbel_of(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Standard Gumbel draws `−ln(−ln U)` with `U` strictly inside `(0, 1)`.
pub fn gumbel_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let mut u: f64 = rng.random();
            while u <= 0.0 {
                u = rng.random();
            }
            T::of(gumbel_of(u))
        })
        .collect();
    Tensor::new(shape.to_vec(), v).expect("gumbel shape")
}

/// Adjacency for a single input slice `x` (`[N, T′]`) outside any training graph.
pub fn learn_adjacency<T: Scalar, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    expert: &PredictorExpert,
    x: &Tensor<T>,
    node_ids: &[u64],
    mode: NoiseMode,
    rng: &mut R,
) -> Result<LearnedAdjacency<T>> {
    let n = node_ids.len();
    if x.shape() != [n, expert.input_steps] {
        return Err(Error::Dimension(format!("adjacency input {:?} for {n} nodes", x.shape())));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone().reshape(vec![1, n, expert.input_steps])?)?;
    let noise = match mode {
        NoiseMode::Train => Some(gumbel_noise(rng, &[1, n, n])),
        NoiseMode::Eval => None,
    };
    let a = expert.adjacency(&mut g, store, xv, noise.as_ref())?;
    Ok(LearnedAdjacency { node_ids: node_ids.to_vec(), weights: g.value(a).clone().reshape(vec![n, n])? })
}

/// Row-wise softmax of the evidence matrix with log-sum-exp stabilisation.
pub fn gating_weights<T: Scalar>(evidence: &Tensor<T>, node_ids: &[u64]) -> Result<GatingWeights<T>> {
    if evidence.rank() != 2 || evidence.shape()[0] != node_ids.len() || evidence.shape()[1] == 0 {
        return Err(Error::Dimension(format!("evidence {:?} for {} nodes", evidence.shape(), node_ids.len())));
    }
    evidence.ensure_finite("evidence")?;
    let k = evidence.shape()[1];
    let mut w = evidence.values().to_vec();
    for row in w.chunks_mut(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    Ok(GatingWeights { node_ids: node_ids.to_vec(), weights: Tensor::new(evidence.shape().to_vec(), w)? })
}

/// `Σ_k g_k ⊙ P_k(x)` for `x` of shape `[B, N, T′]`. The gate is a constant.
/// `gumbel[k]` perturbs expert `k`'s adjacency when present.
pub fn moe_predict<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    experts: &[PredictorExpert],
    gating: &GatingWeights<T>,
    x: Var,
    gumbel: &[Option<Tensor<T>>],
) -> Result<Var> {
    let k = experts.len();
    if k == 0 || gating.weights.shape()[1] != k || (!gumbel.is_empty() && gumbel.len() != k) {
        return Err(Error::Dimension(format!("{k} experts, gate {:?}, {} noise tensors", gating.weights.shape(), gumbel.len())));
    }
    let (b, n) = match g.value(x).shape() {
        [b, n, _] => (*b, *n),
        s => return Err(Error::Dimension(format!("mixture input {s:?}"))),
    };
    if n != gating.node_ids.len() {
        return Err(Error::Dimension(format!("gate has {} nodes, input {n}", gating.node_ids.len())));
    }
    let t = experts[0].output_steps;
    let mut total: Option<Var> = None;
    for (c, e) in experts.iter().enumerate() {
        let p = e.forward(g, store, x, gumbel.get(c).and_then(|o| o.as_ref()))?;
        let mut wv = Vec::with_capacity(b * n * t);
        for _ in 0..b {
            for i in 0..n {
                let gi = gating.weights.values()[i * k + c];
                wv.extend(std::iter::repeat_n(gi, t));
            }
        }
        let weighted = g.mul_const(p, &Tensor::new(vec![b, n, t], wv)?)?;
        total = Some(match total {
            Some(s) => g.add(s, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("at least one expert"))
}

/// Mean absolute error between a prediction and its target.
pub fn prediction_loss<T: Scalar>(g: &mut Graph<T>, prediction: Var, target: &Tensor<T>) -> Result<Var> {
    g.mae(prediction, target)
}

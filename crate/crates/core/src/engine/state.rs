use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{dec_train, encode_latents, kmeans, pretrain_autoencoder, DecTrace, PretrainAutoencoder, CENTROIDS_PARAM};
use crate::config::ExperimentConfig;
use crate::data::{extract_task_week, fit_normalizer, split_task, NormStats, TaskDataset};
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore, Tensor};
use crate::predictor::PredictorExpert;
use crate::reconstructor::{train_group_reconstructors, VaeExpert};
use crate::scalar::Scalar;

/// Architecture sizes; everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_experts: usize,
    pub week_len: usize,
    pub pretrain_hidden: [usize; 2],
    pub pretrain_latent: usize,
    pub reconstructor_hidden: [usize; 2],
    pub latent: usize,
    pub embed: usize,
    pub diffusion_steps: usize,
    pub input_steps: usize,
    pub output_steps: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &ExperimentConfig, steps_per_week: usize) -> Self {
        ModelDims {
            num_experts: cfg.num_experts,
            week_len: steps_per_week,
            pretrain_hidden: cfg.pretrain_hidden,
            pretrain_latent: cfg.pretrain_latent,
            reconstructor_hidden: cfg.reconstructor_hidden,
            latent: cfg.latent,
            embed: cfg.embed,
            diffusion_steps: cfg.diffusion_steps,
            input_steps: cfg.input_steps,
            output_steps: cfg.output_steps,
        }
    }
}

/// Hard groups from pre-training, over the first task's nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedGroups {
    pub node_ids: Vec<u64>,
    pub groups: Vec<Vec<usize>>,
}

/// Everything carried from one task to the next.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub dims: ModelDims,
    pub store: ParamStore<T>,
    pub autoencoder: PretrainAutoencoder,
    pub reconstructors: Vec<VaeExpert>,
    pub predictors: Vec<PredictorExpert>,
    /// Normalization used for each trained task (1-based).
    pub norms: BTreeMap<usize, NormStats>,
    pub seed_groups: Option<SeedGroups>,
    /// Index of the last task trained; 0 before the first.
    pub trained_tasks: usize,
    pub rng: ChaCha8Rng,
    /// Seed of the fixed per-node noise used for evidence scoring.
    pub eval_seed: u64,
}

/// Diagnostics of the pre-training stage.
#[derive(Clone, Debug, Default, Serialize)]
pub struct PretrainReport {
    pub autoencoder_losses: Vec<f64>,
    pub kmeans_inertia: f64,
    pub dec: DecTraceRecord,
    pub group_sizes: Vec<usize>,
    pub empty_clusters: Vec<usize>,
    pub reconstructor_elbo: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DecTraceRecord {
    pub total: Vec<f64>,
    pub recon: Vec<f64>,
    pub cluster: Vec<f64>,
}

impl From<DecTrace> for DecTraceRecord {
    fn from(t: DecTrace) -> Self {
        DecTraceRecord { total: t.total, recon: t.recon, cluster: t.cluster }
    }
}

impl<T: Scalar> ModelState<T> {
    /// Freshly initialised parameters for every component.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.num_experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let autoencoder = PretrainAutoencoder::new(dims.week_len, dims.pretrain_hidden, dims.pretrain_latent);
        autoencoder.init(&mut store, &mut rng)?;
        let (reconstructors, predictors) = Self::experts(&dims);
        for (r, p) in reconstructors.iter().zip(&predictors) {
            r.init(&mut store, &mut rng)?;
            p.init(&mut store, &mut rng)?;
        }
        let eval_seed = rng.random();
        Ok(ModelState {
            dims,
            store,
            autoencoder,
            reconstructors,
            predictors,
            norms: BTreeMap::new(),
            seed_groups: None,
            trained_tasks: 0,
            rng,
            eval_seed,
        })
    }

    /// Expert layouts implied by `dims`.
    pub fn experts(dims: &ModelDims) -> (Vec<VaeExpert>, Vec<PredictorExpert>) {
        let r = (0..dims.num_experts).map(|k| VaeExpert::new(k, dims.week_len, dims.reconstructor_hidden, dims.latent)).collect();
        let p = (0..dims.num_experts)
            .map(|k| PredictorExpert::new(k, dims.input_steps, dims.output_steps, dims.embed, dims.diffusion_steps))
            .collect();
        (r, p)
    }

    pub fn norm(&self, task: usize) -> Result<NormStats> {
        self.norms.get(&task).copied().ok_or_else(|| Error::State(format!("no normalization recorded for task {task}")))
    }
}

pub(crate) fn to_scalar<T: Scalar>(rows: &[Vec<f64>]) -> Vec<Vec<T>> {
    rows.iter().map(|r| r.iter().map(|&v| T::of(v)).collect()).collect()
}

pub(crate) fn rows_tensor<T: Scalar>(rows: &[Vec<T>], cols: usize) -> Result<Tensor<T>> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, cols]));
    }
    Tensor::from_rows(rows)
}

/// Pre-training on the first task: autoencoder, k-means, clustering
/// refinement, hard groups, then per-group reconstructor training.
pub fn pretrain<T: Scalar>(state: &mut ModelState<T>, task: &TaskDataset, cfg: &ExperimentConfig) -> Result<PretrainReport> {
    pretrain_inner(state, task, cfg).map_err(|e| e.in_task(1))
}

fn pretrain_inner<T: Scalar>(state: &mut ModelState<T>, task: &TaskDataset, cfg: &ExperimentConfig) -> Result<PretrainReport> {
    if task.task_index != 1 || state.trained_tasks != 0 || state.seed_groups.is_some() {
        return Err(Error::State("pre-training runs once, on the first task".into()));
    }
    if task.steps_per_week() != state.dims.week_len {
        return Err(Error::Dimension(format!("task week of {} bins, model expects {}", task.steps_per_week(), state.dims.week_len)));
    }
    let split = split_task(task, state.dims.input_steps, state.dims.output_steps)?;
    let flows = task.nodes.iter().map(|&n| task.flow(n)).collect::<Result<Vec<_>>>()?;
    let norm = fit_normalizer(flows, split.train.clone())?;
    let weeks = extract_task_week(task, &task.nodes, &split.train, &norm)?;
    let week_rows: Vec<Vec<T>> = to_scalar(&weeks.rows);
    let x = rows_tensor(&week_rows, state.dims.week_len)?;

    let k = state.dims.num_experts;
    let ae = state.autoencoder.clone();
    let autoencoder_losses = pretrain_autoencoder(&mut state.store, &ae, &x, cfg.pretrain_epochs, T::of(cfg.lr.pretrain))?;
    let latents = encode_latents(&state.store, &ae, &x)?;
    let fit = kmeans(&latents, k, state.rng.random())?;
    if state.store.contains(CENTROIDS_PARAM) {
        state.store.get_mut(CENTROIDS_PARAM)?.tensor = fit.centroids.clone();
    } else {
        state.store.insert(CENTROIDS_PARAM, ParamGroup::PretrainReconstructor, fit.centroids.clone())?;
    }
    let (cluster, trace) = dec_train(&mut state.store, &ae, &x, T::of(cfg.alpha), cfg.dec_epochs, T::of(cfg.lr.pretrain))?;
    let groups = cluster.groups;
    let reconstructor_elbo = train_group_reconstructors(
        &mut state.store,
        &state.reconstructors,
        &groups.groups,
        &week_rows,
        cfg.reconstructor_epochs,
        T::of(cfg.lr.reconstructor),
        &mut state.rng,
    )?;
    state.norms.insert(1, norm);
    state.seed_groups = Some(SeedGroups { node_ids: task.nodes.clone(), groups: groups.groups.clone() });
    Ok(PretrainReport {
        autoencoder_losses,
        kmeans_inertia: fit.inertia.as_f64(),
        dec: trace.into(),
        group_sizes: groups.sizes(),
        empty_clusters: groups.empty_clusters(),
        reconstructor_elbo,
    })
}

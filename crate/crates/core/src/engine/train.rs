use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::audit::{AccessReport, AuditedTask};
use super::groups::{build_localized_groups, consolidation_loss, LocalizedGroups};
use super::replay::{reconstruction_based_replay, ReplaySelection};
use super::sampling::{forgetting_resilient_sampling, synchronize_samples, SyntheticWeekSet};
use super::state::{rows_tensor, ModelState};
use crate::config::ExperimentConfig;
use crate::data::{fit_normalizer, make_windows, normalize_panel, split_task, week_start, NormStats, TaskDataset};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Graph, ParamGroup, ParamStore, Tensor};
use crate::predictor::{gating_weights, gumbel_noise, moe_predict, prediction_loss, GatingWeights};
use crate::reconstructor::{clamp_priors, evaluation_noise, evidence_matrix, VaeExpert};
use crate::scalar::Scalar;

/// Evidence-noise keys of synthetic nodes; real node ids stay below this.
pub const SYNTHETIC_KEY_BASE: u64 = 1 << 63;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    /// Mean prediction loss over the epoch's batches.
    pub loss_o: f64,
    /// Mean per-node ELBO of the grouped nodes, when the term is active.
    pub elbo: Option<f64>,
    /// Mean total objective.
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TaskTrainReport {
    pub task: usize,
    pub trained: bool,
    pub new_nodes: usize,
    pub n_s: usize,
    /// Pre-existing real nodes in the pool.
    pub n_r: usize,
    pub pool_size: usize,
    pub pool_nodes: Vec<u64>,
    /// Sizes of the groups used by the ELBO term.
    pub group_sizes: Vec<usize>,
    pub synthetic_counts: Vec<usize>,
    pub replay: ReplaySelection,
    #[serde(skip)]
    pub groups: Option<LocalizedGroups>,
    pub epochs: Vec<EpochRecord>,
    pub audit: Option<AccessReport>,
    pub norm: Option<NormStats>,
    pub seconds: f64,
}

impl TaskTrainReport {
    /// `pool = ΔN + n_s + n_r`.
    pub fn pool_identity_holds(&self) -> bool {
        self.pool_size == self.new_nodes + self.n_s + self.n_r
    }
}

/// Training pool of one task: real nodes first, synthetic nodes after.
struct Pool<T> {
    real: Vec<u64>,
    /// Normalized full series of the real nodes.
    series: Vec<Vec<f64>>,
    /// Normalized weeks of real then synthetic nodes.
    weeks: Vec<Vec<T>>,
    synthetic: SyntheticWeekSet<T>,
    groups: LocalizedGroups,
}

impl<T: Scalar> Pool<T> {
    fn keys(&self) -> Vec<u64> {
        let syn = (0..self.synthetic.len() as u64).map(|j| SYNTHETIC_KEY_BASE | j);
        self.real.iter().copied().chain(syn).collect()
    }
}

fn normalized_row<T: Scalar>(flow: &[f64], norm: &NormStats) -> Vec<T> {
    flow.iter().map(|&v| T::of(norm.normalize(v))).collect()
}

/// Trains task `task.task_index` starting from `state`.
///
/// The first task trains on every node with its pre-training groups. Later
/// tasks build localized groups and the replay set from a frozen copy of the
/// previous parameters, read full series only for new and replayed nodes, and
/// add synthetic nodes decoded from the previous experts. One JSON record per
/// epoch is written to `log` when given.
pub fn train_task<T: Scalar>(
    state: &mut ModelState<T>,
    task: &TaskDataset,
    cfg: &ExperimentConfig,
    log: Option<&mut dyn Write>,
) -> Result<TaskTrainReport> {
    train_task_inner(state, task, cfg, log).map_err(|e| e.in_task(task.task_index))
}

fn train_task_inner<T: Scalar>(
    state: &mut ModelState<T>,
    task: &TaskDataset,
    cfg: &ExperimentConfig,
    log: Option<&mut dyn Write>,
) -> Result<TaskTrainReport> {
    let started = Instant::now();
    let tau = task.task_index;
    if tau == 0 || state.trained_tasks + 1 != tau {
        return Err(Error::State(format!("cannot train task {tau}: state holds {} trained task(s)", state.trained_tasks)));
    }
    if task.steps_per_week() != state.dims.week_len {
        return Err(Error::Dimension(format!("task week of {} bins, model expects {}", task.steps_per_week(), state.dims.week_len)));
    }
    let policy = cfg.policy();
    let mut report = TaskTrainReport { task: tau, new_nodes: task.new_nodes.len(), trained: true, ..Default::default() };

    if tau > 1 && !policy.train_later {
        let prev = state.norm(tau - 1)?;
        state.norms.insert(tau, prev);
        state.trained_tasks = tau;
        report.norm = Some(prev);
        report.trained = false;
        report.new_nodes = 0;
        report.seconds = started.elapsed().as_secs_f64();
        return Ok(report);
    }

    let split = split_task(task, state.dims.input_steps, state.dims.output_steps)?;
    let spw = task.steps_per_week();
    let wstart = week_start(&split.train, task.start_weekday, task.steps_per_day)?;
    let audit = AuditedTask::new(task);
    let k = state.dims.num_experts;

    let (pool, norm, beta) = if tau == 1 {
        let sg = state.seed_groups.clone().ok_or_else(|| Error::State("first task requires the pre-training stage".into()))?;
        if sg.node_ids != task.nodes {
            return Err(Error::State("pre-training groups were built on a different node set".into()));
        }
        let norm = state.norm(1)?;
        audit.allow(task.nodes.iter().copied());
        let series = task
            .nodes
            .iter()
            .map(|&n| Ok(audit.flow(n)?.iter().map(|&v| norm.normalize(v)).collect()))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let weeks = series.iter().map(|s: &Vec<f64>| s[wstart..wstart + spw].iter().map(|&v| T::of(v)).collect()).collect();
        let groups = LocalizedGroups { node_ids: sg.node_ids, groups: sg.groups };
        let pool = Pool { real: task.nodes.clone(), series, weeks, synthetic: SyntheticWeekSet::empty(), groups };
        (pool, norm, cfg.beta)
    } else {
        let prev = state.norm(tau - 1)?;
        let frozen: ParamStore<T> = state.store.clone();
        let noise_keys = |ids: &[u64]| evaluation_noise::<T>(ids, state.dims.latent, state.eval_seed);
        let prev_weeks =
            |ids: &[u64]| -> Result<Vec<Vec<T>>> { ids.iter().map(|&n| Ok(normalized_row(audit.week(n, wstart, spw)?, &prev))).collect() };
        let n_cur = task.nodes.len();
        let old = task.existing_nodes();

        let mut real: Vec<u64> = task.new_nodes.clone();
        if policy.pool_all {
            real = task.nodes.clone();
        } else {
            let n_r = (policy.replay_fraction * n_cur as f64).round() as usize;
            if n_r > 0 && !old.is_empty() {
                let w = prev_weeks(&old)?;
                let ev = evidence_matrix(&frozen, &state.reconstructors, &rows_tensor(&w, spw)?, &noise_keys(&old))?;
                report.replay = reconstruction_based_replay(&ev, &old, n_r)?;
                real.extend(report.replay.nodes.iter().copied());
            }
        }

        let w = prev_weeks(&real)?;
        let ev = evidence_matrix(&frozen, &state.reconstructors, &rows_tensor(&w, spw)?, &noise_keys(&real))?;
        let groups = build_localized_groups(&ev, &real, k)?;

        audit.allow(real.iter().copied());
        let flows = real.iter().map(|&n| audit.flow(n)).collect::<Result<Vec<_>>>()?;
        let norm = fit_normalizer(flows.iter().copied(), split.train.clone())?;
        let series: Vec<Vec<f64>> = flows.iter().map(|f| f.iter().map(|&v| norm.normalize(v)).collect()).collect();

        let n_s = (policy.sample_fraction * n_cur as f64).round() as usize;
        let mut synthetic = forgetting_resilient_sampling(&frozen, &state.reconstructors, n_s, &mut state.rng)?;
        for wk in &mut synthetic.weeks {
            wk.iter_mut().for_each(|v| *v = T::of(prev.reframe(v.as_f64(), &norm)));
        }

        let mut weeks: Vec<Vec<T>> = series.iter().map(|s| s[wstart..wstart + spw].iter().map(|&v| T::of(v)).collect()).collect();
        weeks.extend(synthetic.weeks.iter().cloned());
        (Pool { real, series, weeks, synthetic, groups }, norm, policy.beta_later)
    };

    report.n_s = pool.synthetic.len();
    report.n_r = pool.real.iter().filter(|n| !task.new_nodes.contains(n)).count();
    report.pool_nodes = pool.real.clone();
    report.pool_size = pool.real.len() + pool.synthetic.len();
    report.synthetic_counts = pool.synthetic.counts(k);
    report.group_sizes = pool.groups.sizes();
    if tau > 1 {
        log::info!("task {tau}: localized group sizes {:?}", report.group_sizes);
    }
    report.norm = Some(norm);

    let epochs = if tau == 1 { cfg.epochs_first } else { cfg.epochs_later };
    report.epochs = run_epochs(state, cfg, &pool, tau, epochs, beta, split.train.clone(), wstart, spw, log)?;
    report.groups = Some(pool.groups);
    report.audit = Some(audit.report());
    state.norms.insert(tau, norm);
    state.trained_tasks = tau;
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_epochs<T: Scalar>(
    state: &mut ModelState<T>,
    cfg: &ExperimentConfig,
    pool: &Pool<T>,
    tau: usize,
    epochs: usize,
    beta: f64,
    train: std::ops::Range<usize>,
    wstart: usize,
    spw: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    let (tin, tout) = (state.dims.input_steps, state.dims.output_steps);
    let k = state.dims.num_experts;
    let panel = normalize_panel(&pool.real, pool.series.iter().map(Vec::as_slice), &NormStats::identity());
    let keys = pool.keys();
    let all_weeks = rows_tensor(&pool.weeks, spw)?;
    let noise = evaluation_noise::<T>(&keys, state.dims.latent, state.eval_seed);
    let real_weeks = &pool.weeks[..pool.real.len()];
    let use_elbo = beta > 0.0 && pool.groups.groups.iter().any(|g| !g.is_empty());
    let mut adam =
        AdamState::new(&[(ParamGroup::Reconstructor, T::of(cfg.lr.reconstructor)), (ParamGroup::Predictor, T::of(cfg.lr.predictor))]);
    let mut records = Vec::with_capacity(epochs);
    let mut last = f64::NAN;
    for epoch in 0..epochs {
        let t0 = Instant::now();
        let evidence = evidence_matrix(&state.store, &state.reconstructors, &all_weeks, &noise)?;
        let gate = gating_weights(&evidence, &keys)?;
        let seed: u64 = state.rng.random();
        let batches = make_windows(&panel, train.clone(), tin, tout, cfg.batch_size, Some(seed), wstart, spw)?;
        let (mut sum_o, mut sum_e, mut sum_l) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let (x, y) = pool_batch(pool, &batch.x, &batch.y, &batch.week_offsets, tin, tout, spw)?;
            let (lo, elbo, loss) = step(state, &gate, x, y, pool, real_weeks, use_elbo, beta, k, &mut adam).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { stage: format!("task {tau}"), last_finite_loss: last },
                e => e,
            })?;
            last = loss;
            sum_o += lo;
            sum_e += elbo;
            sum_l += loss;
        }
        let nb = batches.len().max(1) as f64;
        let grouped = pool.groups.groups.iter().map(Vec::len).sum::<usize>().max(1) as f64;
        let rec = EpochRecord {
            task: tau,
            epoch,
            loss_o: sum_o / nb,
            elbo: use_elbo.then(|| sum_e / nb / grouped),
            loss: sum_l / nb,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::debug!("task {tau} epoch {epoch}: L_O {:.5}", rec.loss_o);
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        records.push(rec);
    }
    Ok(records)
}

/// Real windows followed by synchronized synthetic slices along the node axis.
fn pool_batch<T: Scalar>(
    pool: &Pool<T>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    week_offsets: &[usize],
    tin: usize,
    tout: usize,
    spw: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = week_offsets.len();
    let nr = pool.real.len();
    let cast = |t: &Tensor<f64>| t.values().iter().map(|&v| T::of(v)).collect::<Vec<T>>();
    if pool.synthetic.is_empty() {
        return Ok((Tensor::new(vec![b, nr, tin], cast(x))?, Tensor::new(vec![b, nr, tout], cast(y))?));
    }
    let last: Vec<usize> = week_offsets.iter().map(|&o| (o + tin - 1) % spw).collect();
    let syn = synchronize_samples(&pool.synthetic.weeks, &last, tin, tout)?;
    let ns = pool.synthetic.len();
    let join = |real: &Tensor<f64>, s: &Tensor<T>, t: usize| -> Result<Tensor<T>> {
        let mut v = Vec::with_capacity(b * (nr + ns) * t);
        for i in 0..b {
            v.extend(real.values()[i * nr * t..(i + 1) * nr * t].iter().map(|&a| T::of(a)));
            v.extend_from_slice(&s.values()[i * ns * t..(i + 1) * ns * t]);
        }
        Tensor::new(vec![b, nr + ns, t], v)
    };
    Ok((join(x, &syn.x, tin)?, join(y, &syn.y, tout)?))
}

#[allow(clippy::too_many_arguments)]
fn step<T: Scalar>(
    state: &mut ModelState<T>,
    gate: &GatingWeights<T>,
    x: Tensor<T>,
    y: Tensor<T>,
    pool: &Pool<T>,
    real_weeks: &[Vec<T>],
    use_elbo: bool,
    beta: f64,
    k: usize,
    adam: &mut AdamState<T>,
) -> Result<(f64, f64, f64)> {
    let (b, n) = (x.shape()[0], x.shape()[1]);
    let mut g = Graph::new();
    let xv = g.constant(x)?;
    let gumbel: Vec<Option<Tensor<T>>> = (0..k).map(|_| Some(gumbel_noise(&mut state.rng, &[b, n, n]))).collect();
    let pred = moe_predict(&mut g, &state.store, &state.predictors, gate, xv, &gumbel)?;
    let lo = prediction_loss(&mut g, pred, &y)?;
    let (loss, elbo) = if use_elbo {
        let e = consolidation_loss(&mut g, &state.store, &state.reconstructors, &pool.groups, real_weeks, &mut state.rng)?;
        let neg = g.scale(e, T::of(-beta))?;
        (g.add(lo, neg)?, g.scalar(e).as_f64())
    } else {
        (lo, 0.0)
    };
    let out = (g.scalar(lo).as_f64(), elbo, g.scalar(loss).as_f64());
    state.store.zero_grads();
    g.backward(loss, &mut state.store)?;
    adam_step(&mut state.store, adam)?;
    clamp_priors(&mut state.store, &state.reconstructors)?;
    Ok(out)
}

/// Frozen-parameter evidence of `weeks` (normalized) for the given keys.
pub fn frozen_evidence<T: Scalar>(
    store: &ParamStore<T>,
    experts: &[VaeExpert],
    weeks: &[Vec<T>],
    keys: &[u64],
    latent: usize,
    eval_seed: u64,
) -> Result<Tensor<T>> {
    let len = weeks.first().map_or(0, Vec::len);
    evidence_matrix(store, experts, &rows_tensor(weeks, len)?, &evaluation_noise(keys, latent, eval_seed))
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::checkpoint::save_checkpoint;
use super::metrics::{compute_metrics, MetricsReport, TaskMetrics};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{generate_stream, load_dataset_dir, validate_stream, TaskDataset};
use crate::engine::{evaluate, pretrain, train_task, ModelDims, ModelState, PretrainReport, TaskTrainReport};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TASK_REPORTS_FILE: &str = "task_reports.jsonl";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Checkpoint path after task `task` (0 = after pre-training).
pub fn checkpoint_path(dir: &Path, task: usize) -> PathBuf {
    dir.join(format!("checkpoint_task{task}.ckpt"))
}

/// Tasks described by the configuration's data source.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskDataset>> {
    let tasks = match &cfg.data {
        DataSource::Synthetic(spec) => generate_stream(spec)?.tasks,
        DataSource::Csv { path, bin_minutes } => load_dataset_dir(path, *bin_minutes)?,
    };
    if tasks.is_empty() {
        return Err(Error::Protocol("data source holds no tasks".into()));
    }
    validate_stream(&tasks)?;
    Ok(tasks)
}

pub struct ProtocolOutput<T> {
    pub metrics: MetricsReport,
    pub pretrain: PretrainReport,
    pub tasks: Vec<TaskTrainReport>,
    pub state: ModelState<T>,
}

/// Fresh model and pre-training on the first task.
pub fn run_pretraining<T: Scalar>(cfg: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<(ModelState<T>, PretrainReport)> {
    cfg.validate()?;
    let first = tasks.first().ok_or_else(|| Error::Protocol("no tasks".into()))?;
    let mut state = ModelState::new(ModelDims::from_config(cfg, first.steps_per_week()), cfg.seed)?;
    let report = pretrain(&mut state, first, cfg)?;
    Ok((state, report))
}

/// Test-split metrics of `state` on `task`, over all nodes and over the
/// first task's nodes.
pub fn evaluate_task<T: Scalar>(
    state: &ModelState<T>,
    task: &TaskDataset,
    first_nodes: &[u64],
    cfg: &ExperimentConfig,
) -> Result<TaskMetrics> {
    let f = evaluate(state, task, cfg.batch_size)?;
    let all_nodes = compute_metrics(&f.pred, &f.truth, f.horizon, &cfg.horizons, cfg.mape_epsilon)?;
    let sub = f.select_nodes(first_nodes);
    let first_task_nodes = compute_metrics(&sub.pred, &sub.truth, sub.horizon, &cfg.horizons, cfg.mape_epsilon)?;
    Ok(TaskMetrics { task: task.task_index, nodes: task.nodes.len(), all_nodes, first_task_nodes })
}

fn write_json_line<S: serde::Serialize>(w: &mut impl Write, v: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, v).map_err(|e| Error::Io(e.into()))?;
    w.write_all(b"\n")?;
    Ok(())
}

struct RunLog {
    epochs: BufWriter<File>,
    tasks: BufWriter<File>,
}

impl RunLog {
    fn create(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let f = std::fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(RunLog { epochs: open(TRAIN_LOG_FILE)?, tasks: open(TASK_REPORTS_FILE)? })
    }
}

/// Pre-training, then train and evaluate every task in order.
///
/// With `out_dir`, writes the per-epoch log, per-task reports, a checkpoint
/// after pre-training and after each task, and the final metrics.
pub fn run_protocol<T: Scalar>(cfg: &ExperimentConfig, tasks: &[TaskDataset], out_dir: Option<&Path>) -> Result<ProtocolOutput<T>> {
    let mut log = out_dir.map(|d| RunLog::create(d, false)).transpose()?;
    let (mut state, pre) = run_pretraining::<T>(cfg, tasks)?;
    if let Some(d) = out_dir {
        std::fs::write(d.join(PRETRAIN_REPORT_FILE), serde_json::to_vec_pretty(&pre).map_err(|e| Error::Io(e.into()))?)?;
        save_checkpoint(&state, &cfg.hash(), &checkpoint_path(d, 0))?;
    }
    let (reports, metrics) = run_tasks(&mut state, cfg, tasks, Vec::new(), out_dir, log.as_mut())?;
    Ok(ProtocolOutput { metrics, pretrain: pre, tasks: reports, state })
}

/// Trains and evaluates every task after `state.trained_tasks`, appending to
/// `earlier` (the metrics of the tasks already trained).
///
/// Lets several configurations that agree up to some task share that prefix.
pub fn continue_protocol<T: Scalar>(
    state: &mut ModelState<T>,
    cfg: &ExperimentConfig,
    tasks: &[TaskDataset],
    earlier: Vec<TaskMetrics>,
    out_dir: Option<&Path>,
) -> Result<(Vec<TaskTrainReport>, MetricsReport)> {
    let mut log = out_dir.map(|d| RunLog::create(d, true)).transpose()?;
    run_tasks(state, cfg, tasks, earlier, out_dir, log.as_mut())
}

fn run_tasks<T: Scalar>(
    state: &mut ModelState<T>,
    cfg: &ExperimentConfig,
    tasks: &[TaskDataset],
    mut metrics: Vec<TaskMetrics>,
    out_dir: Option<&Path>,
    mut log: Option<&mut RunLog>,
) -> Result<(Vec<TaskTrainReport>, MetricsReport)> {
    cfg.validate()?;
    let hash = cfg.hash();
    let first_nodes = tasks.first().ok_or_else(|| Error::Protocol("no tasks".into()))?.nodes.clone();
    let mut reports = Vec::new();
    let done = state.trained_tasks;
    for task in tasks.iter().filter(|t| t.task_index > done) {
        let epoch_log = log.as_mut().map(|l| &mut l.epochs as &mut dyn Write);
        let report = train_task(state, task, cfg, epoch_log)?;
        log::info!(
            "task {}: pool {} (new {}, synthetic {}, replay {}) in {:.1}s",
            task.task_index,
            report.pool_size,
            report.new_nodes,
            report.n_s,
            report.n_r,
            report.seconds
        );
        metrics.push(evaluate_task(state, task, &first_nodes, cfg)?);
        if let Some(d) = out_dir {
            save_checkpoint(state, &hash, &checkpoint_path(d, task.task_index))?;
        }
        if let Some(l) = log.as_mut() {
            write_json_line(&mut l.tasks, &report)?;
        }
        reports.push(report);
    }
    let metrics = MetricsReport::new(cfg.protocol.as_str(), cfg.seed, &hash, metrics);
    if let Some(d) = out_dir {
        if let Some(l) = log.as_mut() {
            l.epochs.flush()?;
            l.tasks.flush()?;
        }
        std::fs::write(d.join(METRICS_FILE), serde_json::to_vec_pretty(&metrics).map_err(|e| Error::Io(e.into()))?)?;
    }
    Ok((reports, metrics))
}

use std::ops::Range;

use super::state::{rows_tensor, ModelState};
use crate::data::{make_windows, normalize_panel, split_task, week_start, SplitRanges, TaskDataset};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor};
use crate::predictor::{gating_weights, moe_predict, GatingWeights};
use crate::reconstructor::{evaluation_noise, evidence_matrix};
use crate::scalar::Scalar;

/// Denormalized predictions and targets, both `[samples, nodes, horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub task: usize,
    pub node_ids: Vec<u64>,
    pub samples: usize,
    pub horizon: usize,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

impl Forecast {
    pub fn shape(&self) -> [usize; 3] {
        [self.samples, self.node_ids.len(), self.horizon]
    }

    /// The same forecast restricted to `nodes` (in this forecast's order).
    pub fn select_nodes(&self, nodes: &[u64]) -> Forecast {
        let idx: Vec<usize> = (0..self.node_ids.len()).filter(|&i| nodes.contains(&self.node_ids[i])).collect();
        let (n, h) = (self.node_ids.len(), self.horizon);
        let pick = |v: &[f64]| {
            let mut out = Vec::with_capacity(self.samples * idx.len() * h);
            for s in 0..self.samples {
                for &i in &idx {
                    out.extend_from_slice(&v[(s * n + i) * h..(s * n + i + 1) * h]);
                }
            }
            out
        };
        Forecast {
            task: self.task,
            node_ids: idx.iter().map(|&i| self.node_ids[i]).collect(),
            samples: self.samples,
            horizon: h,
            pred: pick(&self.pred),
            truth: pick(&self.truth),
        }
    }
}

/// Gate for every node of `task`, scored on its first training week.
pub fn task_gating<T: Scalar>(state: &ModelState<T>, task: &TaskDataset, split: &SplitRanges) -> Result<GatingWeights<T>> {
    let norm = state.norm(task.task_index)?;
    let spw = task.steps_per_week();
    let start = week_start(&split.train, task.start_weekday, task.steps_per_day)?;
    let weeks = task
        .nodes
        .iter()
        .map(|&n| Ok(task.flow(n)?[start..start + spw].iter().map(|&v| T::of(norm.normalize(v))).collect()))
        .collect::<Result<Vec<Vec<T>>>>()?;
    let noise = evaluation_noise(&task.nodes, state.dims.latent, state.eval_seed);
    let ev = evidence_matrix(&state.store, &state.reconstructors, &rows_tensor(&weeks, spw)?, &noise)?;
    gating_weights(&ev, &task.nodes)
}

/// Deterministic forecasts over every node of `task` for all windows in `range`.
pub fn forecast<T: Scalar>(state: &ModelState<T>, task: &TaskDataset, range: Range<usize>, batch_size: usize) -> Result<Forecast> {
    let run = || -> Result<Forecast> {
        let norm = state.norm(task.task_index)?;
        let split = split_task(task, state.dims.input_steps, state.dims.output_steps)?;
        let gate = task_gating(state, task, &split)?;
        let flows = task.nodes.iter().map(|&n| task.flow(n)).collect::<Result<Vec<_>>>()?;
        let panel = normalize_panel(&task.nodes, flows.iter().copied(), &norm);
        let (tin, tout) = (state.dims.input_steps, state.dims.output_steps);
        let batches = make_windows(&panel, range, tin, tout, batch_size, None, 0, task.steps_per_week())?;
        let n = task.nodes.len();
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        let mut samples = 0;
        for b in &batches {
            let mut g = Graph::new();
            let x: Vec<T> = b.x.values().iter().map(|&v| T::of(v)).collect();
            let xv = g.constant(Tensor::new(b.x.shape().to_vec(), x)?)?;
            let out = moe_predict(&mut g, &state.store, &state.predictors, &gate, xv, &[])?;
            pred.extend(g.value(out).values().iter().map(|v| norm.denormalize(v.as_f64())));
            for &s in &b.starts {
                for f in &flows {
                    truth.extend_from_slice(&f[s + tin..s + tin + tout]);
                }
            }
            samples += b.batch_size();
        }
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forecast".into()));
        }
        debug_assert_eq!(pred.len(), samples * n * tout);
        Ok(Forecast { task: task.task_index, node_ids: task.nodes.clone(), samples, horizon: tout, pred, truth })
    };
    run().map_err(|e| e.in_task(task.task_index))
}

/// Forecasts over the test split of `task`.
pub fn evaluate<T: Scalar>(state: &ModelState<T>, task: &TaskDataset, batch_size: usize) -> Result<Forecast> {
    let split = split_task(task, state.dims.input_steps, state.dims.output_steps).map_err(|e| e.in_task(task.task_index))?;
    forecast(state, task, split.test, batch_size)
}

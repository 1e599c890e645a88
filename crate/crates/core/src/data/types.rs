use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Raw flow series of one sensor within one task.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSeries {
    pub node_id: u64,
    pub flow: Vec<f64>,
    pub bin_minutes: usize,
}

/// Z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const MIN_STD: f64 = 1e-12;

    pub fn new(mean: f64, std: f64) -> Self {
        NormStats { mean, std: std.max(Self::MIN_STD) }
    }

    pub fn identity() -> Self {
        NormStats { mean: 0.0, std: 1.0 }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Maps a value normalized under `self` into the frame of `other`.
    pub fn reframe(&self, z: f64, other: &NormStats) -> f64 {
        other.normalize(self.denormalize(z))
    }
}

/// One task: a fixed node set over an extended time interval.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    /// 1-based task index.
    pub task_index: usize,
    /// Every node present in this task, ascending.
    pub nodes: Vec<u64>,
    /// Nodes not present in the previous task, ascending.
    pub new_nodes: Vec<u64>,
    pub series: BTreeMap<u64, SensorSeries>,
    /// Filled in once statistics have been fitted for this task.
    pub norm: Option<NormStats>,
    /// Weekday of bin 0 (0 = Monday .. 6 = Sunday).
    pub start_weekday: u8,
    pub steps_per_day: usize,
    pub bin_minutes: usize,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.series.values().next().map_or(0, |s| s.flow.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps_per_week(&self) -> usize {
        7 * self.steps_per_day
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes that were already present in the previous task.
    pub fn existing_nodes(&self) -> Vec<u64> {
        self.nodes.iter().copied().filter(|n| self.new_nodes.binary_search(n).is_err()).collect()
    }

    pub fn flow(&self, node: u64) -> Result<&[f64]> {
        self.series
            .get(&node)
            .map(|s| s.flow.as_slice())
            .ok_or_else(|| Error::Protocol(format!("node {node} not in task {}", self.task_index)))
    }

    /// Checks the structural invariants of a single task.
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_day == 0 {
            return Err(Error::Config("steps_per_day must be positive".into()));
        }
        let len = self.len();
        if !len.is_multiple_of(self.steps_per_day) {
            return Err(Error::Protocol(format!("task {}: series length {len} is not a whole number of days", self.task_index)));
        }
        for n in &self.nodes {
            let s = self.series.get(n).ok_or_else(|| Error::Protocol(format!("node {n} has no series")))?;
            if s.flow.len() != len {
                return Err(Error::Protocol(format!("node {n} has {} bins, expected {len}", s.flow.len())));
            }
        }
        if self.series.len() != self.nodes.len() {
            return Err(Error::Protocol("series map and node list disagree".into()));
        }
        if let Some(bad) = self.new_nodes.iter().find(|n| self.nodes.binary_search(n).is_err()) {
            return Err(Error::Protocol(format!("new node {bad} is not in the node set")));
        }
        Ok(())
    }
}

/// Checks the cross-task invariants: expanding node sets with exact deltas.
pub fn validate_stream(tasks: &[TaskDataset]) -> Result<()> {
    for (i, t) in tasks.iter().enumerate() {
        t.validate()?;
        if t.task_index != i + 1 {
            return Err(Error::Protocol(format!("task {} found at position {}", t.task_index, i + 1)));
        }
        if i == 0 {
            if t.new_nodes != t.nodes {
                return Err(Error::Protocol("every node of the first task is new".into()));
            }
            continue;
        }
        let prev = &tasks[i - 1];
        if let Some(lost) = prev.nodes.iter().find(|n| t.nodes.binary_search(n).is_err()) {
            return Err(Error::Protocol(format!("node {lost} present in task {} is missing from task {}", prev.task_index, t.task_index)));
        }
        let expected: Vec<u64> = t.nodes.iter().copied().filter(|n| prev.nodes.binary_search(n).is_err()).collect();
        if expected != t.new_nodes {
            return Err(Error::Protocol(format!("task {}: new-node list does not match the set difference", t.task_index)));
        }
    }
    Ok(())
}

/// Contiguous train/validation/test ranges along the time axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// One normalized week per node, starting on a Monday.
#[derive(Clone, Debug, PartialEq)]
pub struct WeekMatrix {
    pub node_ids: Vec<u64>,
    /// Absolute bin at which the week starts.
    pub start_bin: usize,
    pub steps_per_week: usize,
    pub rows: Vec<Vec<f64>>,
}

impl WeekMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_rows(&self.rows).unwrap_or_else(|_| Tensor::zeros(&[0, self.steps_per_week]))
    }

    /// Rows restricted to `indices`.
    pub fn select(&self, indices: &[usize]) -> WeekMatrix {
        WeekMatrix {
            node_ids: indices.iter().map(|&i| self.node_ids[i]).collect(),
            start_bin: self.start_bin,
            steps_per_week: self.steps_per_week,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Position within the week cycle of an absolute bin.
    pub fn week_offset(&self, bin: usize) -> usize {
        (bin as i64 - self.start_bin as i64).rem_euclid(self.steps_per_week as i64) as usize
    }
}

/// Normalized per-node series aligned to one clock.
#[derive(Clone, Debug, PartialEq)]
pub struct NodePanel {
    pub node_ids: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
}

impl NodePanel {
    pub fn num_nodes(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// A batch of input/target windows over a common node set.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[batch, nodes, T′]`
    pub x: Tensor<f64>,
    /// `[batch, nodes, T]`
    pub y: Tensor<f64>,
    /// Absolute bin of each window's first input step.
    pub starts: Vec<usize>,
    /// Position of each window's first input step within the week cycle.
    pub week_offsets: Vec<usize>,
}

impl WindowBatch {
    pub fn batch_size(&self) -> usize {
        self.starts.len()
    }
}

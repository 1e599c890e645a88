//! Flow, task-metadata and calendar CSV files.
//!
//! * flows: `task,node_id,bin_index,flow`, sorted by (task, node_id, bin_index),
//!   `bin_index` 0-based within the task.
//! * task metadata: `task,node_id,is_new` with `is_new ∈ {0,1}`.
//! * calendar: `task,start_weekday` (0 = Monday); optional, Monday if absent.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::types::{validate_stream, SensorSeries, TaskDataset};
use crate::error::{Error, Result};

pub const FLOWS_HEADER: &str = "task,node_id,bin_index,flow";
pub const TASKS_HEADER: &str = "task,node_id,is_new";
pub const CALENDAR_HEADER: &str = "task,start_weekday";

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse { path: path.to_path_buf(), msg: format!("line {line}: {msg}") }
}

fn read_rows(path: &Path, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => return Err(parse_err(path, 1, format!("expected header `{header}`, found `{h}`"))),
        None => return Err(parse_err(path, 1, "empty file")),
    }
    Ok(lines.filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l.split(',').map(|f| f.trim().to_string()).collect())).collect())
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, row: &[String], i: usize, name: &str) -> Result<T> {
    row.get(i)
        .ok_or_else(|| parse_err(path, line, format!("missing field `{name}`")))?
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid `{name}`: {:?}", row[i])))
}

/// Reads a flow CSV into one [`TaskDataset`] per task. Every task starts on a Monday.
pub fn load_csv(path: &Path, bin_minutes: usize) -> Result<Vec<TaskDataset>> {
    if bin_minutes == 0 || 1440 % bin_minutes != 0 {
        return Err(Error::Config(format!("bin_minutes {bin_minutes} must divide a day")));
    }
    let steps_per_day = 1440 / bin_minutes;
    let rows = read_rows(path, FLOWS_HEADER)?;
    let mut by_task: BTreeMap<usize, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut last: Option<(usize, u64, usize)> = None;
    for (line, row) in rows {
        let task: usize = field(path, line, &row, 0, "task")?;
        let node: u64 = field(path, line, &row, 1, "node_id")?;
        let bin: usize = field(path, line, &row, 2, "bin_index")?;
        let flow: f64 = field(path, line, &row, 3, "flow")?;
        if !flow.is_finite() || flow < 0.0 {
            return Err(parse_err(path, line, format!("flow {flow} must be finite and non-negative")));
        }
        if let Some(prev) = last {
            if (task, node, bin) <= prev {
                return Err(parse_err(path, line, "rows must be sorted by (task, node_id, bin_index)"));
            }
        }
        last = Some((task, node, bin));
        let series = by_task.entry(task).or_default().entry(node).or_default();
        if bin != series.len() {
            return Err(Error::Gap { task, node_id: node, bin: series.len() });
        }
        series.push(flow);
    }
    let mut tasks = Vec::with_capacity(by_task.len());
    let mut prev_nodes: Vec<u64> = Vec::new();
    for (expected_index, (task, nodes)) in (1..).zip(by_task) {
        if task != expected_index {
            return Err(Error::Protocol(format!("task {expected_index} missing from {}", path.display())));
        }
        let len = nodes.values().map(Vec::len).max().unwrap_or(0);
        if let Some((&node, s)) = nodes.iter().find(|(_, s)| s.len() < len) {
            return Err(Error::Gap { task, node_id: node, bin: s.len() });
        }
        let node_ids: Vec<u64> = nodes.keys().copied().collect();
        if let Some(lost) = prev_nodes.iter().find(|n| !nodes.contains_key(n)) {
            return Err(Error::Protocol(format!("node {lost} disappears in task {task}")));
        }
        let new_nodes = node_ids.iter().copied().filter(|n| prev_nodes.binary_search(n).is_err()).collect();
        let series = nodes.into_iter().map(|(id, flow)| (id, SensorSeries { node_id: id, flow, bin_minutes })).collect();
        prev_nodes = node_ids.clone();
        tasks.push(TaskDataset {
            task_index: task,
            nodes: node_ids,
            new_nodes,
            series,
            norm: None,
            start_weekday: 0,
            steps_per_day,
            bin_minutes,
        });
    }
    validate_stream(&tasks)?;
    Ok(tasks)
}

/// Per-task node membership from a metadata CSV: task → (node, is_new).
pub fn load_task_metadata(path: &Path) -> Result<BTreeMap<usize, Vec<(u64, bool)>>> {
    let mut out: BTreeMap<usize, Vec<(u64, bool)>> = BTreeMap::new();
    for (line, row) in read_rows(path, TASKS_HEADER)? {
        let task: usize = field(path, line, &row, 0, "task")?;
        let node: u64 = field(path, line, &row, 1, "node_id")?;
        let is_new: u8 = field(path, line, &row, 2, "is_new")?;
        if is_new > 1 {
            return Err(parse_err(path, line, "is_new must be 0 or 1"));
        }
        out.entry(task).or_default().push((node, is_new == 1));
    }
    // monotone expansion and consistent new flags
    let mut prev: Vec<u64> = Vec::new();
    for (task, nodes) in &out {
        let mut ids: Vec<u64> = nodes.iter().map(|n| n.0).collect();
        ids.sort_unstable();
        if let Some(lost) = prev.iter().find(|n| ids.binary_search(n).is_err()) {
            return Err(Error::Protocol(format!("node {lost} disappears in task {task}")));
        }
        for &(n, is_new) in nodes {
            if is_new == prev.binary_search(&n).is_ok() {
                return Err(Error::Protocol(format!("task {task}: node {n} has an inconsistent is_new flag")));
            }
        }
        prev = ids;
    }
    Ok(out)
}

/// Task → start weekday.
pub fn load_calendar(path: &Path) -> Result<BTreeMap<usize, u8>> {
    let mut out = BTreeMap::new();
    for (line, row) in read_rows(path, CALENDAR_HEADER)? {
        let task: usize = field(path, line, &row, 0, "task")?;
        let day: u8 = field(path, line, &row, 1, "start_weekday")?;
        if day > 6 {
            return Err(parse_err(path, line, "start_weekday must be in 0..=6"));
        }
        out.insert(task, day);
    }
    Ok(out)
}

pub const FLOWS_FILE: &str = "flows.csv";
pub const TASKS_FILE: &str = "tasks.csv";
pub const CALENDAR_FILE: &str = "calendar.csv";
pub const LABELS_FILE: &str = "labels.csv";

/// Loads `flows.csv` from a directory, cross-checking `tasks.csv` and applying
/// `calendar.csv` when present.
pub fn load_dataset_dir(dir: &Path, bin_minutes: usize) -> Result<Vec<TaskDataset>> {
    let mut tasks = load_csv(&dir.join(FLOWS_FILE), bin_minutes)?;
    let meta_path = dir.join(TASKS_FILE);
    if meta_path.exists() {
        let meta = load_task_metadata(&meta_path)?;
        for t in &tasks {
            let Some(rows) = meta.get(&t.task_index) else {
                return Err(Error::Protocol(format!("task {} missing from {}", t.task_index, meta_path.display())));
            };
            let mut nodes: Vec<u64> = rows.iter().map(|r| r.0).collect();
            nodes.sort_unstable();
            let mut new: Vec<u64> = rows.iter().filter(|r| r.1).map(|r| r.0).collect();
            new.sort_unstable();
            if nodes != t.nodes || new != t.new_nodes {
                return Err(Error::Protocol(format!("task {}: metadata disagrees with flows", t.task_index)));
            }
        }
    }
    let cal_path = dir.join(CALENDAR_FILE);
    if cal_path.exists() {
        let cal = load_calendar(&cal_path)?;
        for t in &mut tasks {
            if let Some(&d) = cal.get(&t.task_index) {
                t.start_weekday = d;
            }
        }
    }
    Ok(tasks)
}

/// Writes flows, task metadata and calendar files into `dir`.
pub fn write_dataset_dir(dir: &Path, tasks: &[TaskDataset]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(FLOWS_FILE))?);
    writeln!(w, "{FLOWS_HEADER}")?;
    for t in tasks {
        for (node, s) in &t.series {
            for (bin, v) in s.flow.iter().enumerate() {
                writeln!(w, "{},{},{},{}", t.task_index, node, bin, v)?;
            }
        }
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join(TASKS_FILE))?);
    writeln!(w, "{TASKS_HEADER}")?;
    for t in tasks {
        for n in &t.nodes {
            let is_new = t.new_nodes.binary_search(n).is_ok() as u8;
            writeln!(w, "{},{},{}", t.task_index, n, is_new)?;
        }
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join(CALENDAR_FILE))?);
    writeln!(w, "{CALENDAR_HEADER}")?;
    for t in tasks {
        writeln!(w, "{},{}", t.task_index, t.start_weekday)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes ground-truth cluster labels as `node_id,cluster`.
pub fn write_labels(path: &Path, labels: &BTreeMap<u64, usize>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "node_id,cluster")?;
    for (n, c) in labels {
        writeln!(w, "{n},{c}")?;
    }
    w.flush()?;
    Ok(())
}

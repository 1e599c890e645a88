use std::cell::RefCell;
use std::collections::BTreeSet;

use serde::Serialize;

use crate::data::TaskDataset;
use crate::error::{Error, Result};

/// Read-tracking view of a task's flows.
///
/// Full-series reads are allowed only for the configured node set; week
/// reads (used to score pre-existing nodes) are tracked separately.
#[derive(Debug)]
pub struct AuditedTask<'a> {
    task: &'a TaskDataset,
    allowed: RefCell<Option<BTreeSet<u64>>>,
    flow_reads: RefCell<BTreeSet<u64>>,
    week_reads: RefCell<BTreeSet<u64>>,
    violations: RefCell<BTreeSet<u64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AccessReport {
    pub task: usize,
    pub allowed: Vec<u64>,
    pub flow_reads: Vec<u64>,
    pub week_reads: Vec<u64>,
    pub violations: Vec<u64>,
}

impl AccessReport {
    /// No violations and every allowed node was read.
    pub fn is_exact(&self) -> bool {
        self.violations.is_empty() && self.flow_reads == self.allowed
    }
}

impl<'a> AuditedTask<'a> {
    /// No full-series reads are allowed until [`AuditedTask::allow`] is called.
    pub fn new(task: &'a TaskDataset) -> Self {
        AuditedTask {
            task,
            allowed: RefCell::new(Some(BTreeSet::new())),
            flow_reads: RefCell::default(),
            week_reads: RefCell::default(),
            violations: RefCell::default(),
        }
    }

    pub fn task(&self) -> &'a TaskDataset {
        self.task
    }

    pub fn allow(&self, nodes: impl IntoIterator<Item = u64>) {
        self.allowed.borrow_mut().get_or_insert_with(BTreeSet::new).extend(nodes);
    }

    /// Full series of `node`.
    pub fn flow(&self, node: u64) -> Result<&'a [f64]> {
        let ok = self.allowed.borrow().as_ref().is_none_or(|a| a.contains(&node));
        if !ok {
            self.violations.borrow_mut().insert(node);
            return Err(Error::Protocol(format!("task {}: read of node {node} outside the training pool", self.task.task_index)));
        }
        self.flow_reads.borrow_mut().insert(node);
        self.task.flow(node)
    }

    /// Bins `[start, start + len)` of `node`.
    pub fn week(&self, node: u64, start: usize, len: usize) -> Result<&'a [f64]> {
        let s = self.task.flow(node)?;
        let w = s
            .get(start..start + len)
            .ok_or_else(|| Error::Protocol(format!("week [{start}, {}) outside series of node {node}", start + len)))?;
        self.week_reads.borrow_mut().insert(node);
        Ok(w)
    }

    pub fn report(&self) -> AccessReport {
        AccessReport {
            task: self.task.task_index,
            allowed: self.allowed.borrow().iter().flatten().copied().collect(),
            flow_reads: self.flow_reads.borrow().iter().copied().collect(),
            week_reads: self.week_reads.borrow().iter().copied().collect(),
            violations: self.violations.borrow().iter().copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SensorSeries;
    use std::collections::BTreeMap;

    fn task() -> TaskDataset {
        let series: BTreeMap<u64, SensorSeries> =
            (1..=3).map(|id| (id, SensorSeries { node_id: id, flow: vec![id as f64; 14], bin_minutes: 60 })).collect();
        TaskDataset {
            task_index: 2,
            nodes: vec![1, 2, 3],
            new_nodes: vec![3],
            series,
            norm: None,
            start_weekday: 0,
            steps_per_day: 2,
            bin_minutes: 720,
        }
    }

    #[test]
    fn disallowed_read_is_recorded_and_refused() {
        let t = task();
        let a = AuditedTask::new(&t);
        a.allow([3]);
        assert!(a.flow(3).is_ok());
        assert!(a.flow(1).is_err());
        let r = a.report();
        assert_eq!(r.violations, vec![1]);
        assert!(!r.is_exact());
    }

    #[test]
    fn week_reads_are_separate() {
        let t = task();
        let a = AuditedTask::new(&t);
        a.allow([3]);
        assert_eq!(a.week(1, 0, 14).unwrap().len(), 14);
        a.flow(3).unwrap();
        let r = a.report();
        assert_eq!(r.week_reads, vec![1]);
        assert!(r.is_exact());
        assert!(a.week(1, 10, 14).is_err());
    }
}

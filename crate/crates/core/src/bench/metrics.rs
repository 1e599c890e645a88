use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Error metrics at one horizon step (`horizon == 0` means all steps).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Percent; NaN when every target is masked.
    pub mape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub horizons: Vec<HorizonMetrics>,
    pub overall: HorizonMetrics,
}

impl MetricSet {
    pub fn at(&self, horizon: usize) -> Option<&HorizonMetrics> {
        if horizon == 0 {
            return Some(&self.overall);
        }
        self.horizons.iter().find(|h| h.horizon == horizon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub nodes: usize,
    pub all_nodes: MetricSet,
    /// Restricted to nodes present since the first task.
    pub first_task_nodes: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub seed: u64,
    pub config_hash: String,
    pub tasks: Vec<TaskMetrics>,
    /// Means across tasks over all nodes.
    pub mean: MetricSet,
}

impl MetricsReport {
    pub fn new(protocol: &str, seed: u64, config_hash: &str, tasks: Vec<TaskMetrics>) -> Self {
        let mean = mean_sets(tasks.iter().map(|t| &t.all_nodes));
        MetricsReport { protocol: protocol.into(), seed, config_hash: config_hash.into(), tasks, mean }
    }

    pub fn last_task(&self) -> Option<&TaskMetrics> {
        self.tasks.last()
    }
}

fn mean_sets<'a>(sets: impl Iterator<Item = &'a MetricSet>) -> MetricSet {
    let sets: Vec<&MetricSet> = sets.collect();
    let avg = |pick: &dyn Fn(&MetricSet) -> HorizonMetrics, horizon: usize| {
        let n = sets.len().max(1) as f64;
        let (mut mae, mut rmse, mut mape) = (0.0, 0.0, 0.0);
        for s in &sets {
            let h = pick(s);
            mae += h.mae;
            rmse += h.rmse;
            mape += h.mape;
        }
        HorizonMetrics { horizon, mae: mae / n, rmse: rmse / n, mape: mape / n }
    };
    let horizons = sets
        .first()
        .map(|s| s.horizons.iter().enumerate().map(|(i, h)| avg(&|m: &MetricSet| m.horizons[i], h.horizon)).collect())
        .unwrap_or_default();
    MetricSet { horizons, overall: avg(&|m: &MetricSet| m.overall, 0) }
}

/// MAE, RMSE and masked MAPE of denormalized `[samples, nodes, T]` arrays,
/// at each 1-based horizon step and over all steps.
pub fn compute_metrics(pred: &[f64], truth: &[f64], steps: usize, horizons: &[usize], mape_epsilon: f64) -> Result<MetricSet> {
    if pred.len() != truth.len() || steps == 0 || !pred.len().is_multiple_of(steps) {
        return Err(Error::Dimension(format!("prediction of {} values vs truth of {} with {steps} steps", pred.len(), truth.len())));
    }
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > steps) {
        return Err(Error::Config(format!("horizon {h} outside 1..={steps}")));
    }
    let at = |h: Option<usize>| {
        let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
        let (mut pct, mut m) = (0.0, 0usize);
        for (i, (&p, &y)) in pred.iter().zip(truth).enumerate() {
            if h.is_some_and(|h| i % steps != h - 1) {
                continue;
            }
            let d = (p - y).abs();
            abs += d;
            sq += d * d;
            n += 1;
            if y.abs() > mape_epsilon {
                pct += d / y.abs();
                m += 1;
            }
        }
        let n = n as f64;
        HorizonMetrics {
            horizon: h.unwrap_or(0),
            mae: abs / n,
            rmse: (sq / n).sqrt(),
            mape: if m == 0 { f64::NAN } else { 100.0 * pct / m as f64 },
        }
    };
    Ok(MetricSet { horizons: horizons.iter().map(|&h| at(Some(h))).collect(), overall: at(None) })
}

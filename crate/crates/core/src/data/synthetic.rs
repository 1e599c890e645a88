//! Desk-scale generator of expanding sensor networks with planted clusters.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::types::{validate_stream, SensorSeries, TaskDataset};
use crate::error::{Error, Result};

/// Daily/weekly template of one planted cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPattern {
    /// Mean flow level.
    pub base: f64,
    /// Scale of the daily profile.
    pub amplitude: f64,
    /// Phase of the daily profile as a fraction of a day.
    pub phase: f64,
    /// Relative weights of the first, second, .. daily harmonics.
    pub harmonics: Vec<f64>,
    /// Multiplier on the amplitude for Saturday and Sunday.
    pub weekend_factor: f64,
}

impl ClusterPattern {
    /// Template value at bin `t` of a series whose bin 0 falls on `start_weekday`.
    pub fn value(&self, t: usize, steps_per_day: usize, start_weekday: u8) -> f64 {
        let day = t / steps_per_day;
        let u = (t % steps_per_day) as f64 / steps_per_day as f64;
        let weekday = (start_weekday as usize + day) % 7;
        let scale = if weekday >= 5 { self.weekend_factor } else { 1.0 };
        let shape: f64 = self.harmonics.iter().enumerate().map(|(h, w)| w * (TAU * (h + 1) as f64 * (u - self.phase)).cos()).sum();
        self.base + self.amplitude * scale * shape
    }
}

/// Configuration of a synthetic stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSpec {
    pub num_tasks: usize,
    pub initial_nodes: usize,
    pub nodes_per_task: usize,
    pub num_clusters: usize,
    pub steps_per_day: usize,
    pub days_per_task: usize,
    /// Explicit templates; generated from `seed` when empty.
    pub patterns: Vec<ClusterPattern>,
    /// Standard deviation of i.i.d. noise as a fraction of the cluster amplitude.
    pub noise_level: f64,
    /// Node-specific perturbation of amplitude, base and phase.
    pub jitter: f64,
    /// Per-task random walk applied to every template.
    pub drift: f64,
    /// Cluster weights for nodes added after the first task; uniform when absent.
    pub new_node_cluster_weights: Option<Vec<f64>>,
    /// Weekday of bin 0 per task; drawn from `seed` when absent.
    pub start_weekdays: Option<Vec<u8>>,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            num_tasks: 3,
            initial_nodes: 30,
            nodes_per_task: 10,
            num_clusters: 3,
            steps_per_day: 24,
            days_per_task: 28,
            patterns: Vec::new(),
            noise_level: 0.05,
            jitter: 0.05,
            drift: 0.0,
            new_node_cluster_weights: None,
            start_weekdays: None,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tasks", self.num_tasks),
            ("initial_nodes", self.initial_nodes),
            ("num_clusters", self.num_clusters),
            ("steps_per_day", self.steps_per_day),
            ("days_per_task", self.days_per_task),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("stream spec `{name}` must be positive")));
        }
        if self.num_tasks > 1 && self.nodes_per_task == 0 {
            return Err(Error::Config("nodes_per_task must be positive for multi-task streams".into()));
        }
        if !(self.noise_level >= 0.0 && self.jitter >= 0.0 && self.drift >= 0.0) {
            return Err(Error::Config("noise_level, jitter and drift must be non-negative".into()));
        }
        if !self.patterns.is_empty() && self.patterns.len() != self.num_clusters {
            return Err(Error::Config("pattern count must equal num_clusters".into()));
        }
        if let Some(w) = &self.new_node_cluster_weights {
            if w.len() != self.num_clusters || w.iter().any(|v| *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("new_node_cluster_weights must be non-negative, one per cluster".into()));
            }
        }
        if let Some(d) = &self.start_weekdays {
            if d.len() != self.num_tasks || d.iter().any(|&v| v > 6) {
                return Err(Error::Config("start_weekdays needs one weekday in 0..=6 per task".into()));
            }
        }
        Ok(())
    }

    pub fn total_nodes(&self) -> usize {
        self.initial_nodes + self.nodes_per_task * self.num_tasks.saturating_sub(1)
    }
}

/// Generated tasks plus the planted cluster of every node.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticStream {
    pub tasks: Vec<TaskDataset>,
    pub labels: BTreeMap<u64, usize>,
    /// Templates in force during each task (after drift).
    pub patterns_per_task: Vec<Vec<ClusterPattern>>,
}

impl SyntheticStream {
    /// Noise-free template series of `cluster` during task `task_index` (1-based).
    pub fn template(&self, task_index: usize, cluster: usize) -> Vec<f64> {
        let t = &self.tasks[task_index - 1];
        let p = &self.patterns_per_task[task_index - 1][cluster];
        (0..t.len()).map(|i| p.value(i, t.steps_per_day, t.start_weekday).max(0.0)).collect()
    }
}

fn default_patterns(k: usize, rng: &mut ChaCha8Rng) -> Vec<ClusterPattern> {
    (0..k)
        .map(|c| ClusterPattern {
            base: rng.random_range(150.0..300.0),
            amplitude: rng.random_range(60.0..120.0),
            phase: (c as f64 / k as f64 + rng.random_range(-0.03..0.03)).rem_euclid(1.0),
            harmonics: vec![1.0, rng.random_range(0.0..0.6), rng.random_range(0.0..0.3)],
            weekend_factor: rng.random_range(0.4..1.0),
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct NodeJitter {
    amplitude: f64,
    base: f64,
    phase: f64,
}

/// Builds a stream from `spec`; bitwise reproducible for a fixed seed.
pub fn generate_stream(spec: &StreamSpec) -> Result<SyntheticStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut patterns = if spec.patterns.is_empty() { default_patterns(spec.num_clusters, &mut rng) } else { spec.patterns.clone() };
    let weekdays: Vec<u8> = match &spec.start_weekdays {
        Some(d) => d.clone(),
        None => (0..spec.num_tasks).map(|_| rng.random_range(0..7u8)).collect(),
    };

    let mut labels = BTreeMap::new();
    let mut jitter = BTreeMap::new();
    let draw_jitter = |rng: &mut ChaCha8Rng| {
        let mut z = || -> f64 { StandardNormal.sample(&mut *rng) };
        NodeJitter { amplitude: 1.0 + spec.jitter * z(), base: 1.0 + 0.5 * spec.jitter * z(), phase: 0.02 * spec.jitter * z() }
    };

    // first-task nodes are spread evenly over the clusters, in shuffled order
    let mut initial: Vec<usize> = (0..spec.initial_nodes).map(|i| i % spec.num_clusters).collect();
    initial.shuffle(&mut rng);
    for (i, c) in initial.into_iter().enumerate() {
        let id = i as u64 + 1;
        labels.insert(id, c);
        jitter.insert(id, draw_jitter(&mut rng));
    }

    let weights = spec.new_node_cluster_weights.clone().unwrap_or_else(|| vec![1.0; spec.num_clusters]);
    let picker = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("cluster weights: {e}")))?;

    let len = spec.days_per_task * spec.steps_per_day;
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    let mut patterns_per_task = Vec::with_capacity(spec.num_tasks);
    let mut prev_nodes: Vec<u64> = Vec::new();
    for task in 1..=spec.num_tasks {
        if task > 1 {
            for p in &mut patterns {
                let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
                p.amplitude *= (1.0 + spec.drift * z()).max(0.1);
                p.base *= (1.0 + 0.5 * spec.drift * z()).max(0.1);
                p.phase = (p.phase + 0.05 * spec.drift * z()).rem_euclid(1.0);
            }
            for _ in 0..spec.nodes_per_task {
                let id = labels.len() as u64 + 1;
                labels.insert(id, picker.sample(&mut rng));
                jitter.insert(id, draw_jitter(&mut rng));
            }
        }
        let nodes: Vec<u64> = labels.keys().copied().collect();
        let new_nodes: Vec<u64> = nodes.iter().copied().filter(|n| prev_nodes.binary_search(n).is_err()).collect();
        let start_weekday = weekdays[task - 1];
        let mut series = BTreeMap::new();
        for &id in &nodes {
            let j = jitter[&id];
            let base = &patterns[labels[&id]];
            let p = ClusterPattern {
                base: base.base * j.base,
                amplitude: base.amplitude * j.amplitude,
                phase: base.phase + j.phase,
                harmonics: base.harmonics.clone(),
                weekend_factor: base.weekend_factor,
            };
            let sigma = spec.noise_level * base.amplitude;
            let flow = (0..len)
                .map(|t| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let noise = sigma * e;
                    (p.value(t, spec.steps_per_day, start_weekday) + noise).max(0.0)
                })
                .collect();
            series.insert(id, SensorSeries { node_id: id, flow, bin_minutes: 1440 / spec.steps_per_day.max(1) });
        }
        tasks.push(TaskDataset {
            task_index: task,
            nodes: nodes.clone(),
            new_nodes,
            series,
            norm: None,
            start_weekday,
            steps_per_day: spec.steps_per_day,
            bin_minutes: 1440 / spec.steps_per_day,
        });
        patterns_per_task.push(patterns.clone());
        prev_nodes = nodes;
    }
    validate_stream(&tasks)?;
    Ok(SyntheticStream { tasks, labels, patterns_per_task })
}

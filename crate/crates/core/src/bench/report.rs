use std::collections::BTreeMap;
use std::fmt::Write;

use super::metrics::{HorizonMetrics, MetricSet, MetricsReport};

fn horizon_label(h: usize) -> String {
    if h == 0 {
        "all".into()
    } else {
        h.to_string()
    }
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

fn rows(set: &MetricSet) -> impl Iterator<Item = &HorizonMetrics> {
    set.horizons.iter().chain(std::iter::once(&set.overall))
}

/// One row per run, task, node scope and horizon.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("protocol,seed,task,scope,horizon,mae,rmse,mape\n");
    for r in reports {
        for t in &r.tasks {
            for (scope, set) in [("all", &t.all_nodes), ("first_task", &t.first_task_nodes)] {
                for h in rows(set) {
                    let _ = writeln!(
                        out,
                        "{},{},{},{scope},{},{},{},{}",
                        r.protocol,
                        r.seed,
                        t.task,
                        horizon_label(h.horizon),
                        fmt(h.mae),
                        fmt(h.rmse),
                        fmt(h.mape)
                    );
                }
            }
        }
    }
    out
}

/// Per protocol, task and horizon: every seed's all-node metrics.
fn collect(reports: &[MetricsReport]) -> BTreeMap<(String, usize, usize), Vec<HorizonMetrics>> {
    let mut m: BTreeMap<(String, usize, usize), Vec<HorizonMetrics>> = BTreeMap::new();
    for r in reports {
        for t in &r.tasks {
            for h in rows(&t.all_nodes) {
                m.entry((r.protocol.clone(), t.task, h.horizon)).or_default().push(*h);
            }
        }
    }
    m
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Markdown table of seed-averaged MAE/RMSE/MAPE per protocol and task.
pub fn summary_markdown(reports: &[MetricsReport]) -> String {
    let data = collect(reports);
    let mut horizons: Vec<usize> = data.keys().map(|k| k.2).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let lead = usize::from(horizons.first() == Some(&0));
    horizons.rotate_left(lead);
    let mut out = String::from("| protocol | task |");
    for &h in &horizons {
        let _ = write!(out, " MAE@{0} | RMSE@{0} | MAPE@{0} |", horizon_label(h));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|---|---|".repeat(horizons.len()));
    out.push('\n');
    let mut keys: Vec<(String, usize)> = data.keys().map(|k| (k.0.clone(), k.1)).collect();
    keys.dedup();
    for (p, t) in keys {
        let _ = write!(out, "| {p} | {t} |");
        for &h in &horizons {
            match data.get(&(p.clone(), t, h)) {
                Some(v) => {
                    let _ = write!(
                        out,
                        " {:.4} | {:.4} | {:.2} |",
                        mean(v.iter().map(|m| m.mae)),
                        mean(v.iter().map(|m| m.rmse)),
                        mean(v.iter().map(|m| m.mape))
                    );
                }
                None => out.push_str(" | | |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Per-task MAE series for plotting: mean, min and max over seeds.
pub fn plot_data_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("protocol,task,horizon,mae_mean,mae_min,mae_max,seeds\n");
    for ((p, t, h), v) in collect(reports) {
        let maes: Vec<f64> = v.iter().map(|m| m.mae).collect();
        let lo = maes.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = maes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(out, "{p},{t},{},{},{},{},{}", horizon_label(h), fmt(mean(maes.iter().copied())), fmt(lo), fmt(hi), maes.len());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::metrics::TaskMetrics;

    fn report(protocol: &str, seed: u64, mae: f64) -> MetricsReport {
        let h = |horizon| HorizonMetrics { horizon, mae, rmse: mae * 2.0, mape: 10.0 };
        let set = MetricSet { horizons: vec![h(3), h(12)], overall: h(0) };
        let t = TaskMetrics { task: 1, nodes: 4, all_nodes: set.clone(), first_task_nodes: set };
        MetricsReport::new(protocol, seed, "x", vec![t])
    }

    #[test]
    fn csv_has_row_per_scope_and_horizon() {
        let csv = metrics_csv(&[report("tfmoe", 0, 1.0)]);
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
        assert!(csv.contains("tfmoe,0,1,first_task,all,1.000000,2.000000,10.000000"));
    }

    #[test]
    fn plot_data_averages_seeds() {
        let csv = plot_data_csv(&[report("static", 0, 1.0), report("static", 1, 3.0)]);
        assert!(csv.contains("static,1,3,2.000000,1.000000,3.000000,2"), "{csv}");
    }

    #[test]
    fn markdown_lists_each_protocol() {
        let md = summary_markdown(&[report("static", 0, 1.0), report("tfmoe", 0, 0.5)]);
        assert!(md.starts_with("| protocol | task | MAE@3 |"));
        assert!(md.contains("| static | 1 | 1.0000 |"));
        assert!(md.contains("| tfmoe | 1 | 0.5000 |"));
    }
}

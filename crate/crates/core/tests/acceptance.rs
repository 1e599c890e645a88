//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfmoe::bench::{
    checkpoint_path, compute_metrics, continue_protocol, evaluate_task, load_checkpoint, load_tasks, run_pretraining, run_protocol,
    MetricsReport,
};
use tfmoe::cluster::{adjusted_rand_index, soft_assign, target_distribution};
use tfmoe::config::{DataSource, ExperimentConfig, LearningRates, Protocol};
use tfmoe::data::{generate_stream, split_task, week_start, StreamSpec, TaskDataset};
use tfmoe::engine::{evaluate, frozen_evidence, reconstruction_based_replay, train_task, ModelState, TaskTrainReport};
use tfmoe::nn::{Graph, Tensor};
use tfmoe::oracle::gradcheck_suite;
use tfmoe::predictor::gating_weights;

const GRADCHECK_H: f64 = 1e-5;
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET_S: f64 = 30.0;
const FORMULA_TOL: f64 = 1e-12;
const FORMULA_INSTANCES: usize = 100;
const SEEDS: u64 = 5;
const MIN_ARI: f64 = 0.9;
const MIN_ARI_SEEDS: usize = 4;
const CLUSTER_BUDGET_S: f64 = 60.0;
const MIN_MATCH: f64 = 0.9;
const MATCH_BUDGET_S: f64 = 60.0;
const EXPANSIBLE_MARGIN: f64 = 0.05;
const SWEEP_BUDGET_S: f64 = 300.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!("{} criterion {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= FORMULA_TOL * b.abs().max(1.0)
}

// ---- 1 ------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    let t0 = Instant::now();
    let cases = gradcheck_suite(0, GRADCHECK_H, GRADCHECK_TOL).expect("gradcheck suite");
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<String> = cases.iter().filter(|c| !c.passed()).map(|c| format!("{} {}", c.kernel, c.shape)).collect();
    let worst = cases.iter().map(|c| c.report.worst()).fold(0.0, f64::max);
    Outcome {
        pass: failed.is_empty() && secs < GRADCHECK_BUDGET_S,
        detail: format!("{} cases, worst rel err {worst:.2e}, failed {failed:?}, {secs:.1}s", cases.len()),
    }
}

// ---- 2 ------------------------------------------------------------------

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn soft_assign_ref(z: &Tensor<f64>, mu: &Tensor<f64>) -> Vec<f64> {
    let (n, k) = (z.shape()[0], mu.shape()[0]);
    let mut out = Vec::new();
    for i in 0..n {
        let kernel: Vec<f64> = (0..k)
            .map(|j| {
                let d2: f64 = z.row(i).iter().zip(mu.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                1.0 / (1.0 + d2)
            })
            .collect();
        let s: f64 = kernel.iter().sum();
        out.extend(kernel.iter().map(|v| v / s));
    }
    out
}

fn target_ref(q: &Tensor<f64>) -> Vec<f64> {
    let (n, k) = (q.shape()[0], q.shape()[1]);
    let freq: Vec<f64> = (0..k).map(|j| (0..n).map(|i| q.row(i)[j]).sum()).collect();
    let mut out = Vec::new();
    for i in 0..n {
        let num: Vec<f64> = (0..k).map(|j| q.row(i)[j].powi(2) / freq[j]).collect();
        let s: f64 = num.iter().sum();
        out.extend(num.iter().map(|v| v / s));
    }
    out
}

fn kl_ref(qm: &[f64], qlv: &[f64], pm: &[f64], plv: &[f64]) -> f64 {
    let d = pm.len();
    let mut kl = 0.0;
    for i in 0..qm.len() {
        let (vq, vp) = (qlv[i].exp(), plv[i % d].exp());
        kl += 0.5 * ((vp / vq).ln() + (vq + (qm[i] - pm[i % d]).powi(2)) / vp - 1.0);
    }
    kl
}

fn gating_ref(ev: &Tensor<f64>) -> Vec<f64> {
    let (n, k) = (ev.shape()[0], ev.shape()[1]);
    let mut out = Vec::new();
    for i in 0..n {
        let r = ev.row(i);
        for a in 0..k {
            out.push(1.0 / (0..k).map(|b| (r[b] - r[a]).exp()).sum::<f64>());
        }
    }
    out
}

/// MAE, RMSE, MAPE of horizon `h` (0 = all) over a `[samples, nodes, steps]` array.
fn metrics_ref(pred: &[f64], truth: &[f64], samples: usize, nodes: usize, steps: usize, h: usize, eps: f64) -> [f64; 3] {
    let (mut abs, mut sq, mut n, mut pct, mut m) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in 0..samples {
        for v in 0..nodes {
            for t in 0..steps {
                if h != 0 && t + 1 != h {
                    continue;
                }
                let idx = (s * nodes + v) * steps + t;
                let e = pred[idx] - truth[idx];
                abs += e.abs();
                sq += e * e;
                n += 1.0;
                if truth[idx].abs() > eps {
                    pct += (e / truth[idx]).abs();
                    m += 1.0;
                }
            }
        }
    }
    [abs / n, (sq / n).sqrt(), 100.0 * pct / m]
}

fn replay_ref(ev: &Tensor<f64>, ids: &[u64], n_r: usize) -> Vec<u64> {
    let mut left: Vec<(f64, u64)> = ids.iter().enumerate().map(|(i, &n)| (ev.row(i).iter().sum(), n)).collect();
    let mut out = Vec::new();
    while out.len() < n_r && !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if left[j].0 < left[best].0 || (left[j].0 == left[best].0 && left[j].1 < left[best].1) {
                best = j;
            }
        }
        out.push(left.remove(best).1);
    }
    out
}

fn formula_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut fails: BTreeMap<&str, usize> = BTreeMap::new();
    let mut check = |name: &'static str, ok: bool| {
        *fails.entry(name).or_default() += usize::from(!ok);
    };
    for _ in 0..FORMULA_INSTANCES {
        let (n, k, d) = (rng.random_range(1..20), rng.random_range(1..6), rng.random_range(1..8));
        let z = random_matrix(&mut rng, n, d, -5.0, 5.0);
        let mu = random_matrix(&mut rng, k, d, -5.0, 5.0);
        let q = soft_assign(&z, &mu).unwrap();
        check("soft_assign", q.values().iter().zip(soft_assign_ref(&z, &mu)).all(|(&a, b)| close(a, b)));
        let p = target_distribution(&q).unwrap();
        check("target_distribution", p.values().iter().zip(target_ref(&q)).all(|(&a, b)| close(a, b)));

        let (qm, qlv) = (random_matrix(&mut rng, n, d, -3.0, 3.0), random_matrix(&mut rng, n, d, -4.0, 4.0));
        let (pm, plv) = (random_matrix(&mut rng, 1, d, -3.0, 3.0), random_matrix(&mut rng, 1, d, -4.0, 4.0));
        let mut g = Graph::new();
        let vars: Vec<_> = [&qm, &qlv]
            .into_iter()
            .cloned()
            .chain([&pm, &plv].into_iter().map(|t| t.clone().reshape(vec![d]).unwrap()))
            .map(|t| g.constant(t).unwrap())
            .collect();
        let kl = g.gaussian_kl(vars[0], vars[1], vars[2], vars[3]).unwrap();
        check("gaussian_kl", close(g.scalar(kl), kl_ref(qm.values(), qlv.values(), pm.values(), plv.values())));

        let ev = random_matrix(&mut rng, n, k, -5000.0, 0.0);
        let ids: Vec<u64> = (0..n as u64).map(|i| 3 * i + 1).collect();
        let w = gating_weights(&ev, &ids).unwrap();
        check("gating_weights", w.weights.values().iter().zip(gating_ref(&ev)).all(|(&a, b)| close(a, b)));

        // integer-valued scores produce ties that the id order must break
        let ev = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.random_range(-6..0) as f64).collect()).unwrap();
        let n_r = rng.random_range(0..n + 2);
        let sel = reconstruction_based_replay(&ev, &ids, n_r).unwrap();
        check("reconstruction_based_replay", sel.nodes == replay_ref(&ev, &ids, n_r));

        let (samples, nodes, steps) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let len = samples * nodes * steps;
        let pred: Vec<f64> = (0..len).map(|_| rng.random_range(-100.0..100.0)).collect();
        let truth: Vec<f64> = (0..len).map(|_| rng.random_range(1.0..100.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let horizons: Vec<usize> = (1..=steps).collect();
        let m = compute_metrics(&pred, &truth, steps, &horizons, 1e-3).unwrap();
        let mut ok = true;
        for (h, got) in std::iter::once((0, m.overall)).chain(m.horizons.iter().map(|x| (x.horizon, *x))) {
            let want = metrics_ref(&pred, &truth, samples, nodes, steps, h, 1e-3);
            ok &= close(got.mae, want[0]) && close(got.rmse, want[1]) && close(got.mape, want[2]);
        }
        check("compute_metrics", ok);
    }
    let bad: Vec<String> = fails.iter().filter(|(_, &f)| f > 0).map(|(n, f)| format!("{n} ({f})")).collect();
    Outcome { pass: bad.is_empty(), detail: format!("{} oracles x {FORMULA_INSTANCES} instances, mismatches {bad:?}", fails.len()) }
}

// ---- desk scenario -------------------------------------------------------

fn desk_config(seed: u64, spec: StreamSpec) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        num_experts: 3,
        pretrain_latent: 8,
        pretrain_hidden: [32, 16],
        latent: 8,
        reconstructor_hidden: [32, 16],
        embed: 8,
        input_steps: 12,
        output_steps: 12,
        pretrain_epochs: 300,
        dec_epochs: 100,
        reconstructor_epochs: 300,
        epochs_first: 20,
        epochs_later: 10,
        batch_size: 32,
        lr: LearningRates { pretrain: 1e-3, reconstructor: 1e-3, predictor: 1e-2 },
        sample_fraction: 0.09,
        replay_fraction: 0.1,
        data: DataSource::Synthetic(spec),
        ..Default::default()
    }
}

fn stream_config(seed: u64) -> ExperimentConfig {
    let spec = StreamSpec {
        num_tasks: 3,
        initial_nodes: 24,
        nodes_per_task: 8,
        num_clusters: 3,
        steps_per_day: 24,
        days_per_task: 28,
        noise_level: 0.05,
        jitter: 0.05,
        drift: 0.15,
        seed,
        ..Default::default()
    };
    desk_config(seed, spec)
}

/// 30 planted nodes in the first task, 9 held-out nodes in the second.
fn planted_config(seed: u64) -> ExperimentConfig {
    let spec = StreamSpec {
        num_tasks: 2,
        initial_nodes: 30,
        nodes_per_task: 9,
        num_clusters: 3,
        noise_level: 0.05,
        jitter: 0.05,
        drift: 0.0,
        seed: 100 + seed,
        ..Default::default()
    };
    desk_config(seed, spec)
}

// ---- 3 and 4 -------------------------------------------------------------

fn group_labels(state: &ModelState<f64>, labels: &BTreeMap<u64, usize>) -> (Vec<usize>, Vec<usize>) {
    let sg = state.seed_groups.as_ref().unwrap();
    let mut found = vec![0; sg.node_ids.len()];
    for (k, g) in sg.groups.iter().enumerate() {
        g.iter().for_each(|&i| found[i] = k);
    }
    (found, sg.node_ids.iter().map(|n| labels[n]).collect())
}

/// Planted cluster holding most members of each seed group.
fn majority_label(state: &ModelState<f64>, labels: &BTreeMap<u64, usize>, k: usize) -> Vec<Option<usize>> {
    let sg = state.seed_groups.as_ref().unwrap();
    sg.groups
        .iter()
        .map(|g| {
            let mut counts = vec![0; k];
            g.iter().for_each(|&i| counts[labels[&sg.node_ids[i]]] += 1);
            (!g.is_empty()).then(|| (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap())
        })
        .collect()
}

fn held_out_weeks(state: &ModelState<f64>, task: &TaskDataset) -> Vec<Vec<f64>> {
    let split = split_task(task, state.dims.input_steps, state.dims.output_steps).unwrap();
    let start = week_start(&split.train, task.start_weekday, task.steps_per_day).unwrap();
    let norm = state.norm(1).unwrap();
    let spw = task.steps_per_week();
    task.new_nodes.iter().map(|&n| task.flow(n).unwrap()[start..start + spw].iter().map(|&v| norm.normalize(v)).collect()).collect()
}

fn clustering_and_matching() -> (Outcome, Outcome) {
    let (mut aris, mut cluster_secs) = (Vec::new(), 0.0);
    let (mut matched, mut held_out, mut match_secs) = (0, 0, 0.0);
    for seed in 0..SEEDS {
        let cfg = planted_config(seed);
        let DataSource::Synthetic(spec) = &cfg.data else { unreachable!() };
        let stream = generate_stream(spec).unwrap();
        let labels = stream.labels.clone();
        let tasks = stream.tasks;

        let t0 = Instant::now();
        let mut clustering_only = cfg.clone();
        clustering_only.reconstructor_epochs = 0;
        let (state, _) = run_pretraining::<f64>(&clustering_only, &tasks).unwrap();
        cluster_secs += t0.elapsed().as_secs_f64();
        let (found, truth) = group_labels(&state, &labels);
        aris.push(adjusted_rand_index(&truth, &found));

        let t0 = Instant::now();
        let (state, _) = run_pretraining::<f64>(&cfg, &tasks).unwrap();
        let owner = majority_label(&state, &labels, spec.num_clusters);
        let weeks = held_out_weeks(&state, &tasks[1]);
        let ev =
            frozen_evidence(&state.store, &state.reconstructors, &weeks, &tasks[1].new_nodes, state.dims.latent, state.eval_seed).unwrap();
        for (i, n) in tasks[1].new_nodes.iter().enumerate() {
            let row = ev.row(i);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            matched += usize::from(owner[best] == Some(labels[n]));
            held_out += 1;
        }
        match_secs += t0.elapsed().as_secs_f64();
    }
    let good = aris.iter().filter(|&&a| a >= MIN_ARI).count();
    let rate = matched as f64 / held_out as f64;
    (
        Outcome {
            pass: good >= MIN_ARI_SEEDS && cluster_secs < CLUSTER_BUDGET_S,
            detail: format!("ARI {aris:.3?}, {good}/{SEEDS} seeds >= {MIN_ARI}, {cluster_secs:.1}s"),
        },
        Outcome {
            pass: rate >= MIN_MATCH && match_secs < MATCH_BUDGET_S,
            detail: format!("{matched}/{held_out} held-out nodes matched ({:.1}%), {match_secs:.1}s", 100.0 * rate),
        },
    )
}

// ---- 5 to 9 --------------------------------------------------------------

const ABLATIONS: [&str; 5] = ["full", "w/o consolidation", "w/o sampling", "w/o replay", "expansible"];
const BASELINES: [&str; 2] = ["static", "retrained"];

fn variant(base: &ExperimentConfig, name: &str) -> ExperimentConfig {
    let mut cfg = base.clone();
    match name {
        "full" => {}
        "w/o consolidation" => cfg.consolidation = false,
        "w/o sampling" => cfg.sampling = false,
        "w/o replay" => cfg.replay = false,
        "expansible" => cfg.protocol = Protocol::Expansible,
        "static" => cfg.protocol = Protocol::Static,
        "retrained" => cfg.protocol = Protocol::Retrained,
        _ => unreachable!(),
    }
    cfg
}

struct Sweep {
    metrics: BTreeMap<&'static str, Vec<MetricsReport>>,
    reports: Vec<(ExperimentConfig, Vec<TaskDataset>, Vec<TaskTrainReport>)>,
    ablation_secs: f64,
}

/// Every variant shares pre-training and the first task, which no switch
/// affects, then branches.
fn sweep() -> Sweep {
    let mut out = Sweep { metrics: BTreeMap::new(), reports: Vec::new(), ablation_secs: 0.0 };
    for seed in 0..SEEDS {
        let t0 = Instant::now();
        let base = stream_config(seed);
        let tasks = load_tasks(&base).unwrap();
        let (mut state, _) = run_pretraining::<f64>(&base, &tasks).unwrap();
        let first = train_task(&mut state, &tasks[0], &base, None).unwrap();
        let m1 = evaluate_task(&state, &tasks[0], &tasks[0].nodes, &base).unwrap();
        out.reports.push((base.clone(), tasks.clone(), vec![first]));
        let mut prefix_secs = t0.elapsed().as_secs_f64();
        for name in ABLATIONS.iter().chain(&BASELINES) {
            let t0 = Instant::now();
            let cfg = variant(&base, name);
            let mut branch = state.clone();
            let (reports, m) = continue_protocol(&mut branch, &cfg, &tasks, vec![m1.clone()], None).unwrap();
            if ABLATIONS.contains(name) {
                out.ablation_secs += t0.elapsed().as_secs_f64() + prefix_secs;
                prefix_secs = 0.0;
            }
            out.metrics.entry(name).or_default().push(m);
            out.reports.push((cfg, tasks.clone(), reports));
        }
    }
    out
}

fn forgetting_direction(s: &Sweep) -> Outcome {
    let first_nodes =
        |name: &str| -> Vec<f64> { s.metrics[name].iter().map(|m| m.last_task().unwrap().first_task_nodes.overall.mae).collect() };
    let full = first_nodes("full");
    let mut pass = s.ablation_secs < SWEEP_BUDGET_S;
    let mut detail = format!("full {full:.3?};");
    for name in &ABLATIONS[1..] {
        let other = first_nodes(name);
        let diff = median(other.iter().zip(&full).map(|(o, f)| o - f).collect());
        let rel = median(other.iter().zip(&full).map(|(o, f)| (o - f) / f).collect());
        pass &= diff >= 0.0;
        if *name == "expansible" {
            pass &= rel >= EXPANSIBLE_MARGIN;
        }
        detail += &format!(" {name} median diff {diff:+.3} ({:+.1}%);", 100.0 * rel);
    }
    detail += &format!(" {:.0}s", s.ablation_secs);
    Outcome { pass, detail }
}

fn access_audit(s: &Sweep) -> Outcome {
    let (mut checked, mut bad) = (0, Vec::new());
    for (cfg, tasks, reports) in &s.reports {
        let policy = cfg.policy();
        for r in reports.iter().filter(|r| r.task > 1 && r.trained && !policy.pool_all) {
            let task = &tasks[r.task - 1];
            let mut expect: Vec<u64> = task.new_nodes.iter().chain(&r.replay.nodes).copied().collect();
            expect.sort_unstable();
            expect.dedup();
            checked += 1;
            match &r.audit {
                Some(a) if a.is_exact() && a.allowed == expect => {}
                other => bad.push(format!("seed {} task {}: {:?}", cfg.seed, r.task, other.as_ref().map(|a| &a.violations))),
            }
        }
    }
    Outcome { pass: bad.is_empty() && checked > 0, detail: format!("{checked} task runs audited, violations {bad:?}") }
}

fn pool_identity(s: &Sweep) -> Outcome {
    let all: Vec<&TaskTrainReport> = s.reports.iter().flat_map(|r| &r.2).filter(|r| r.trained).collect();
    let bad: Vec<String> =
        all.iter().filter(|r| !r.pool_identity_holds()).map(|r| format!("task {} pool {}", r.task, r.pool_size)).collect();
    Outcome { pass: bad.is_empty() && !all.is_empty(), detail: format!("{} trained tasks, mismatches {bad:?}", all.len()) }
}

fn determinism() -> Outcome {
    let cfg = stream_config(0);
    let tasks = load_tasks(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = run_protocol::<f64>(&cfg, &tasks, Some(dir.path())).unwrap();
    let b = run_protocol::<f64>(&cfg, &tasks, None).unwrap();
    let same_metrics = a.metrics == b.metrics;
    let (back, _) = load_checkpoint::<f64>(&checkpoint_path(dir.path(), tasks.len())).unwrap();
    let mut bitwise = true;
    for task in &tasks {
        let before = evaluate(&a.state, task, cfg.batch_size).unwrap();
        let after = evaluate(&back, task, cfg.batch_size).unwrap();
        bitwise &= before.pred.iter().map(|v| v.to_bits()).eq(after.pred.iter().map(|v| v.to_bits()));
    }
    Outcome {
        pass: same_metrics && bitwise,
        detail: format!("repeat metrics identical {same_metrics}, checkpoint predictions bitwise {bitwise}"),
    }
}

fn baseline_ordering(s: &Sweep) -> Outcome {
    let agg = |name: &str| median(s.metrics[name].iter().map(|m| m.mean.overall.mae).collect());
    let order = ["retrained", "full", "expansible", "static"];
    let vals: Vec<f64> = order.iter().map(|n| agg(n)).collect();
    Outcome {
        pass: vals.windows(2).all(|w| w[0] <= w[1]),
        detail: order.iter().zip(&vals).map(|(n, v)| format!("{n} {v:.3}")).collect::<Vec<_>>().join(" <= "),
    }
}

fn main() {
    let mut all = Vec::new();
    let mut run = |id: usize, name: &str, o: Outcome| {
        report(id, name, &o);
        all.push(o.pass);
    };
    run(1, "gradient oracle", gradient_oracle());
    run(2, "formula oracles", formula_oracles());
    let (c3, c4) = clustering_and_matching();
    run(3, "clustering recovery", c3);
    run(4, "expert matching", c4);
    let s = sweep();
    run(5, "forgetting direction", forgetting_direction(&s));
    run(6, "access audit", access_audit(&s));
    run(7, "pool-size identity", pool_identity(&s));
    run(8, "determinism and persistence", determinism());
    run(9, "baseline ordering", baseline_ordering(&s));
    let passed = all.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", all.len());
    if passed != all.len() {
        std::process::exit(1);
    }
}

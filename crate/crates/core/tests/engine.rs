mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfmoe::bench::{run_protocol, TaskMetrics};
use tfmoe::config::{ExperimentConfig, Protocol};
use tfmoe::data::{split_task, week_start, TaskDataset};
use tfmoe::engine::{build_localized_groups, frozen_evidence, pretrain, reconstruction_based_replay, train_task, ModelDims, ModelState};
use tfmoe::nn::{adam_step, AdamState, Graph, ParamGroup, ParamStore, Tensor};
use tfmoe::predictor::{moe_predict, prediction_loss, GatingWeights, PredictorExpert};

fn metrics(cfg: &ExperimentConfig) -> Vec<TaskMetrics> {
    let tasks = common::tasks(cfg.seed);
    run_protocol::<f64>(cfg, &tasks, None).unwrap().metrics.tasks
}

#[test]
fn identical_runs_give_identical_metrics() {
    let cfg = common::config(Protocol::Tfmoe, 11);
    assert_eq!(metrics(&cfg), metrics(&cfg));
}

#[test]
fn disabling_every_component_is_the_expansible_baseline() {
    let mut bare = common::config(Protocol::Tfmoe, 12);
    bare.consolidation = false;
    bare.sampling = false;
    bare.replay = false;
    let expansible = common::config(Protocol::Expansible, 12);
    assert_ne!(bare.hash(), expansible.hash());
    assert_eq!(metrics(&bare), metrics(&expansible));
}

fn normalized_weeks(task: &TaskDataset, nodes: &[u64], state: &ModelState<f64>, prev: usize) -> Vec<Vec<f64>> {
    let split = split_task(task, state.dims.input_steps, state.dims.output_steps).unwrap();
    let start = week_start(&split.train, task.start_weekday, task.steps_per_day).unwrap();
    let norm = state.norm(prev).unwrap();
    let spw = task.steps_per_week();
    nodes.iter().map(|&n| task.flow(n).unwrap()[start..start + spw].iter().map(|&v| norm.normalize(v)).collect()).collect()
}

#[test]
fn groups_and_replay_come_from_the_previous_parameters() {
    let cfg = common::config(Protocol::Tfmoe, 13);
    let tasks = common::tasks(13);
    let mut state = ModelState::<f64>::new(ModelDims::from_config(&cfg, tasks[0].steps_per_week()), 13).unwrap();
    pretrain(&mut state, &tasks[0], &cfg).unwrap();
    train_task(&mut state, &tasks[0], &cfg, None).unwrap();
    let snapshot = state.clone();
    let report = train_task(&mut state, &tasks[1], &cfg, None).unwrap();

    let task = &tasks[1];
    let score = |s: &ModelState<f64>, nodes: &[u64]| {
        let weeks = normalized_weeks(task, nodes, s, 1);
        frozen_evidence(&s.store, &s.reconstructors, &weeks, nodes, s.dims.latent, s.eval_seed).unwrap()
    };
    let old = task.existing_nodes();
    let n_r = (cfg.replay_fraction * task.nodes.len() as f64).round() as usize;
    let replay = reconstruction_based_replay(&score(&snapshot, &old), &old, n_r).unwrap();
    assert_eq!(replay, report.replay);
    let pool: Vec<u64> = task.new_nodes.iter().chain(&replay.nodes).copied().collect();
    let groups = build_localized_groups(&score(&snapshot, &pool), &pool, cfg.num_experts).unwrap();
    assert_eq!(Some(groups), report.groups);

    // the trained parameters score the same nodes differently
    assert_ne!(score(&snapshot, &old), score(&state, &old));
}

fn toy_predictors(store: &mut ParamStore<f64>, k: usize) -> Vec<PredictorExpert> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..k)
        .map(|i| {
            let e = PredictorExpert::new(i, 6, 6, 4, 1);
            e.init(store, &mut rng).unwrap();
            e
        })
        .collect()
}

#[test]
fn mixture_is_linear_in_the_gate() {
    let mut store = ParamStore::new();
    let experts = toy_predictors(&mut store, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let x = Tensor::new(vec![2, 4, 6], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let gate = |rng: &mut ChaCha8Rng| Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let (a, b) = (gate(&mut rng), gate(&mut rng));
        let sum = Tensor::new(vec![4, 3], a.values().iter().zip(b.values()).map(|(p, q)| p + q).collect()).unwrap();
        let run = |w: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let gw = GatingWeights { node_ids: (0..4).collect(), weights: w };
            let o = moe_predict(&mut g, &store, &experts, &gw, xv, &[]).unwrap();
            g.value(o).values().to_vec()
        };
        let (oa, ob, os) = (run(a), run(b), run(sum));
        for i in 0..os.len() {
            assert!((os[i] - oa[i] - ob[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn prediction_loss_falls_on_a_toy_batch() {
    let mut store = ParamStore::new();
    let experts = toy_predictors(&mut store, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let series: Vec<Vec<f64>> = (0..5).map(|n| (0..12).map(|t| ((t + n) as f64 * 0.6).sin()).collect()).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for s in &series {
        xs.extend_from_slice(&s[..6]);
        ys.extend_from_slice(&s[6..]);
    }
    let x = Tensor::new(vec![1, 5, 6], xs).unwrap();
    let y = Tensor::new(vec![1, 5, 6], ys).unwrap();
    let gate = GatingWeights { node_ids: (0..5).collect(), weights: Tensor::full(&[5, 2], 0.5) };
    let mut adam = AdamState::new(&[(ParamGroup::Predictor, 1e-2)]);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let noise: Vec<Option<Tensor<f64>>> = (0..2).map(|_| Some(tfmoe::predictor::gumbel_noise(&mut rng, &[1, 5, 5]))).collect();
        let o = moe_predict(&mut g, &store, &experts, &gate, xv, &noise).unwrap();
        let l = prediction_loss(&mut g, o, &y).unwrap();
        losses.push(g.scalar(l));
        store.zero_grads();
        g.backward(l, &mut store).unwrap();
        adam_step(&mut store, &mut adam).unwrap();
    }
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.9 * head, "{head} -> {tail}");
}

use proptest::collection::vec;
use proptest::prelude::*;

use tfmoe::bench::compute_metrics;
use tfmoe::cluster::{adjusted_rand_index, cluster_kl, hard_assign, soft_assign, target_distribution};
use tfmoe::data::{extract_task_week, first_monday, generate_stream, split_protocol, window_count, NormStats, StreamSpec};
use tfmoe::engine::{build_localized_groups, reconstruction_based_replay, sample_counts};
use tfmoe::nn::{adam_step, AdamState, Graph, ParamGroup, ParamStore, Tensor};
use tfmoe::predictor::gating_weights;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    vec(lo..hi, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn sized_matrix(lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    (1usize..8, 1usize..6).prop_flat_map(move |(r, c)| matrix(r, c, lo, hi))
}

fn stochastic(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    vec(0.01f64..1.0, rows * cols).prop_map(move |mut v| {
        for r in v.chunks_mut(cols) {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= s);
        }
        Tensor::new(vec![rows, cols], v).unwrap()
    })
}

fn row_sums(t: &Tensor<f64>) -> Vec<f64> {
    (0..t.shape()[0]).map(|i| t.row(i).iter().sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in sized_matrix(-300.0, 300.0)) {
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let s = g.softmax_rows(v).unwrap();
        for r in row_sums(g.value(s)) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_kl_is_non_negative(q in matrix(3, 4, -3.0, 3.0), lq in matrix(3, 4, -4.0, 4.0),
                                   p in matrix(1, 4, -3.0, 3.0), lp in matrix(1, 4, -4.0, 4.0)) {
        let mut g = Graph::new();
        let (a, b) = (g.constant(q.clone()).unwrap(), g.constant(lq.clone()).unwrap());
        let (c, d) = (g.constant(p.reshape(vec![4]).unwrap()).unwrap(), g.constant(lp.reshape(vec![4]).unwrap()).unwrap());
        let kl = g.gaussian_kl(a, b, c, d).unwrap();
        prop_assert!(g.scalar(kl) >= -1e-12);
        let same = g.gaussian_kl(a, b, a, b).unwrap();
        prop_assert_eq!(g.scalar(same), 0.0);
    }

    #[test]
    fn adam_with_zero_gradient_is_identity(vals in vec(-5.0f64..5.0, 1..10), steps in 1usize..5) {
        let mut store = ParamStore::new();
        store.insert("w", ParamGroup::Predictor, Tensor::new(vec![vals.len()], vals.clone()).unwrap()).unwrap();
        let mut adam = AdamState::new(&[(ParamGroup::Predictor, 0.1)]);
        for _ in 0..steps {
            store.get_mut("w").unwrap().tensor.set_grad(Some(vec![0.0; vals.len()])).unwrap();
            adam_step(&mut store, &mut adam).unwrap();
        }
        prop_assert_eq!(store.tensor("w").unwrap().values(), vals.as_slice());
    }

    #[test]
    fn normalize_round_trip(mean in -1e3f64..1e3, std in 1e-3f64..1e3, x in -1e4f64..1e4) {
        let n = NormStats::new(mean, std);
        prop_assert!((n.denormalize(n.normalize(x)) - x).abs() <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn window_count_formula(len in 0usize..500, tin in 1usize..20, tout in 1usize..20) {
        let expect = if len + 1 > tin + tout { len + 1 - tin - tout } else { 0 };
        prop_assert_eq!(window_count(len, tin, tout), expect);
    }

    #[test]
    fn split_is_a_contiguous_partition(len in 10usize..100_000) {
        let s = split_protocol(len, 1).unwrap();
        prop_assert_eq!(s.train.start, 0);
        prop_assert_eq!(s.train.end, s.val.start);
        prop_assert_eq!(s.val.end, s.test.start);
        prop_assert_eq!(s.test.end, len);
        prop_assert_eq!(s.train.end, len * 6 / 10);
    }

    #[test]
    fn first_monday_is_a_monday(from in 0usize..400, weekday in 0u8..7, spd in 1usize..30) {
        let m = first_monday(from, weekday, spd);
        prop_assert!(m >= from);
        prop_assert!(m < from + 7 * spd);
        // day index of bin m, counted from the weekday of bin 0 (Monday = 0)
        prop_assert_eq!((weekday as usize + m / spd) % 7, 0);
        prop_assert_eq!(m % spd, 0);
    }

    #[test]
    fn soft_assignments_and_targets_are_stochastic(z in matrix(6, 3, -4.0, 4.0), mu in matrix(3, 3, -4.0, 4.0)) {
        let q = soft_assign(&z, &mu).unwrap();
        let p = target_distribution(&q).unwrap();
        for r in row_sums(&q).into_iter().chain(row_sums(&p)) {
            prop_assert!((r - 1.0).abs() < 1e-9);
        }
        prop_assert!(cluster_kl(&p, &q) >= -1e-12);
        prop_assert_eq!(cluster_kl(&q, &q), 0.0);
    }

    #[test]
    fn hard_assign_partitions(q in stochastic(9, 4)) {
        let h = hard_assign(&q);
        let mut all: Vec<usize> = h.groups.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..9).collect::<Vec<_>>());
        for (i, &c) in h.assignment.iter().enumerate() {
            prop_assert!(h.groups[c].contains(&i));
        }
    }

    #[test]
    fn ari_ignores_label_names(labels in vec(0usize..4, 2..30), other in vec(0usize..4, 2..30), shift in 1usize..4) {
        let n = labels.len().min(other.len());
        let (a, b) = (&labels[..n], &other[..n]);
        let renamed: Vec<usize> = a.iter().map(|&l| (l + shift) % 4).collect();
        let same = adjusted_rand_index(a, &renamed);
        prop_assert!(same == 1.0 || (a.iter().all(|&l| l == a[0]) && same.is_finite()));
        prop_assert!((adjusted_rand_index(a, b) - adjusted_rand_index(b, a)).abs() < 1e-12);
    }

    #[test]
    fn gating_rows_sum_to_one_and_ignore_shifts(ev in sized_matrix(-5000.0, 10.0), c in -1e3f64..1e3) {
        let ids: Vec<u64> = (0..ev.shape()[0] as u64).collect();
        let g = gating_weights(&ev, &ids).unwrap();
        for r in row_sums(&g.weights) {
            prop_assert!((r - 1.0).abs() < 1e-9);
        }
        let shifted = gating_weights(&ev.map(|v| v + c), &ids).unwrap();
        for (a, b) in g.weights.values().iter().zip(shifted.weights.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_matches_brute_force_sort(ev in matrix(12, 3, -50.0, 0.0), n_r in 0usize..15) {
        let ids: Vec<u64> = (0..12).map(|i| 100 + 7 * i).collect();
        let sel = reconstruction_based_replay(&ev, &ids, n_r).unwrap();
        let mut all: Vec<(f64, u64)> = ids.iter().enumerate().map(|(i, &n)| (ev.row(i).iter().sum(), n)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<u64> = all.iter().take(n_r.min(12)).map(|x| x.1).collect();
        prop_assert_eq!(sel.nodes, want);
    }

    #[test]
    fn localized_groups_partition_nodes(ev in matrix(10, 3, -20.0, 0.0)) {
        let ids: Vec<u64> = (0..10).collect();
        let lg = build_localized_groups(&ev, &ids, 3).unwrap();
        prop_assert_eq!(lg.sizes().iter().sum::<usize>(), 10);
        for (k, g) in lg.groups.iter().enumerate() {
            for &i in g {
                let row = ev.row(i);
                prop_assert!(row.iter().all(|&v| v <= row[k]));
            }
        }
    }

    #[test]
    fn sample_counts_split_evenly(n_s in 0usize..200, k in 1usize..9) {
        let c = sample_counts(n_s, k);
        prop_assert_eq!(c.iter().sum::<usize>(), n_s);
        prop_assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
    }

    #[test]
    fn metrics_match_scalar_loop(pred in vec(-50.0f64..50.0, 24), truth in vec(-50.0f64..50.0, 24)) {
        let m = compute_metrics(&pred, &truth, 4, &[1, 4], 1.0).unwrap();
        prop_assert!(m.overall.mae <= m.overall.rmse + 1e-12);
        let mut abs = 0.0;
        for i in 0..24 {
            abs += (pred[i] - truth[i]).abs();
        }
        prop_assert!((m.overall.mae - abs / 24.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generated_streams_are_reproducible_and_grow(seed in 0u64..1000, added in 1usize..5) {
        let spec = StreamSpec { num_tasks: 3, initial_nodes: 6, nodes_per_task: added, num_clusters: 2,
                                steps_per_day: 4, days_per_task: 28, seed, ..Default::default() };
        let a = generate_stream(&spec).unwrap();
        let b = generate_stream(&spec).unwrap();
        prop_assert_eq!(&a.tasks, &b.tasks);
        for w in a.tasks.windows(2) {
            let new: Vec<u64> = w[1].nodes.iter().copied().filter(|n| !w[0].nodes.contains(n)).collect();
            prop_assert_eq!(&w[1].new_nodes, &new);
            prop_assert!(w[0].nodes.iter().all(|n| w[1].nodes.contains(n)));
        }
        for t in &a.tasks {
            let split = split_protocol(t.len(), 1).unwrap();
            let wk = extract_task_week(t, &t.nodes, &split.train, &NormStats::identity()).unwrap();
            prop_assert!(wk.rows.iter().all(|r| r.len() == 7 * t.steps_per_day));
            prop_assert_eq!((t.start_weekday as usize + wk.start_bin / t.steps_per_day) % 7, 0);
        }
    }
}

//! Finite-difference suite over every graph kernel and the composed model losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::PretrainAutoencoder;
use crate::engine::{consolidation_loss, LocalizedGroups};
use crate::error::Result;
use crate::nn::{finite_difference_check, GradCheckReport, Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::predictor::{moe_predict, prediction_loss, GatingWeights, PredictorExpert};
use crate::reconstructor::{normal_noise, vae_elbo, VaeExpert};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// One kernel on one shape.
#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub kernel: &'static str,
    pub shape: String,
    pub report: GradCheckReport,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

type Forward = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

struct Case {
    kernel: &'static str,
    shape: String,
    store: ParamStore<f64>,
    forward: Forward,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape product")
}

/// Values with magnitude in `[0.2, 1)`, away from the kinks of ReLU and `|·|`.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.2, 1.0);
    for v in t.values_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn params(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, ParamGroup::Predictor, t).expect("unique names");
    }
    s
}

/// `Σ c ⊙ v` with fixed random `c`, so every output element carries gradient.
fn head(g: &mut Graph<f64>, v: Var, c: &Tensor<f64>) -> Result<Var> {
    let w = g.mul_const(v, c)?;
    g.sum(w)
}

fn shape_str(dims: &[usize]) -> String {
    format!("{dims:?}")
}

fn elementwise_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) {
    for dims in [vec![5], vec![3, 4], vec![2, 3, 2]] {
        let x = off_zero(rng, &dims);
        let c = uniform(rng, &dims, -1.0, 1.0);
        let y = uniform(rng, &dims, -1.0, 1.0);
        let k = rng.random_range(-2.0..2.0);
        let cc = c.clone();
        out.push(Case {
            kernel: "relu",
            shape: shape_str(&dims),
            store: params(vec![("x", x.clone())]),
            forward: Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let r = g.relu(x)?;
                head(g, r, &cc)
            }),
        });
        let (cc, yc) = (c.clone(), y.clone());
        out.push(Case {
            kernel: "add+scale+add_const+mul_const",
            shape: shape_str(&dims),
            store: params(vec![("a", x.clone()), ("b", y.clone())]),
            forward: Box::new(move |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let sb = g.scale(b, k)?;
                let ab = g.add(a, sb)?;
                let shifted = g.add_const(ab, &yc)?;
                let m = g.mul_const(shifted, &yc)?;
                let both = g.add(m, a)?;
                head(g, both, &cc)
            }),
        });
        let cc = c.clone();
        out.push(Case {
            kernel: "sum+mean",
            shape: shape_str(&dims),
            store: params(vec![("x", x.clone())]),
            forward: Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let w = g.mul_const(x, &cc)?;
                let sq = g.mul_const(w, &cc)?;
                let m = g.mean(sq)?;
                let t = g.sum(w)?;
                g.add(m, t)
            }),
        });
        // targets offset from x so no residual sits at the |·| kink
        let target = Tensor::new(dims.clone(), x.values().iter().zip(y.values()).map(|(a, b)| a + 0.3 * b.signum() + 0.1 * b).collect())
            .expect("same shape");
        let t2 = target.clone();
        out.push(Case {
            kernel: "abs_err_sum+mae",
            shape: shape_str(&dims),
            store: params(vec![("x", x.clone())]),
            forward: Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let a = g.abs_err_sum(x, &t2)?;
                let m = g.mae(x, &t2)?;
                let m3 = g.scale(m, 3.0)?;
                g.add(a, m3)
            }),
        });
        out.push(Case {
            kernel: "sq_err_sum+mse",
            shape: shape_str(&dims),
            store: params(vec![("x", x.clone())]),
            forward: Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let a = g.sq_err_sum(x, &target)?;
                let m = g.mse(x, &target)?;
                let m3 = g.scale(m, 3.0)?;
                g.add(a, m3)
            }),
        });
        out.push(Case {
            kernel: "map",
            shape: shape_str(&dims),
            store: params(vec![("x", x)]),
            forward: Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let t = g.map(x, f64::tanh, |v| 1.0 - v.tanh() * v.tanh())?;
                head(g, t, &c)
            }),
        });
    }
}

fn linear_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) {
    for (lead, din, dout) in [(vec![1], 1, 1), (vec![4], 4, 3), (vec![2, 3], 3, 5)] {
        let mut xs = lead.clone();
        xs.push(din);
        let mut os = lead.clone();
        os.push(dout);
        let c = uniform(rng, &os, -1.0, 1.0);
        out.push(Case {
            kernel: "linear",
            shape: format!("x{xs:?} w[{din}, {dout}]"),
            store: params(vec![
                ("x", uniform(rng, &xs, -1.0, 1.0)),
                ("w", uniform(rng, &[din, dout], -1.0, 1.0)),
                ("b", uniform(rng, &[dout], -1.0, 1.0)),
            ]),
            forward: Box::new(move |g, s| {
                let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
                let y = g.linear(x, w, Some(b))?;
                head(g, y, &c)
            }),
        });
    }
}

fn conv_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) {
    for (b, cin, len, cout, width) in [(1, 1, 5, 1, 2), (2, 3, 6, 2, 3), (2, 2, 4, 3, 1)] {
        let lout = len - width + 1;
        let c = uniform(rng, &[b, cout, lout], -1.0, 1.0);
        out.push(Case {
            kernel: "conv1d",
            shape: format!("x[{b}, {cin}, {len}] k[{cout}, {cin}, {width}]"),
            store: params(vec![
                ("x", uniform(rng, &[b, cin, len], -1.0, 1.0)),
                ("k", uniform(rng, &[cout, cin, width], -1.0, 1.0)),
                ("b", uniform(rng, &[cout], -1.0, 1.0)),
            ]),
            forward: Box::new(move |g, s| {
                let (x, k, bias) = (g.param(s, "x")?, g.param(s, "k")?, g.param(s, "b")?);
                let y = g.conv1d(x, k, Some(bias))?;
                head(g, y, &c)
            }),
        });
    }
    for (dims, left, right) in [(vec![3], 1, 1), (vec![2, 4], 2, 0), (vec![2, 2, 3], 0, 3)] {
        let mut os = dims.clone();
        *os.last_mut().expect("rank >= 1") += left + right;
        let c = uniform(rng, &os, -1.0, 1.0);
        out.push(Case {
            kernel: "pad_last",
            shape: format!("x{dims:?} pad ({left}, {right})"),
            store: params(vec![("x", uniform(rng, &dims, -1.0, 1.0))]),
            forward: Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let y = g.pad_last(x, left, right)?;
                head(g, y, &c)
            }),
        });
    }
}

fn diffusion_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) {
    // (adjacency shape, signal shape, Λ shape)
    let configs: [(Vec<usize>, Vec<usize>, [usize; 4]); 3] =
        [(vec![3, 3], vec![3, 2], [2, 2, 1, 2]), (vec![4, 4], vec![4, 1], [3, 1, 2, 2]), (vec![2, 3, 3], vec![2, 3, 2, 2], [1, 2, 2, 2])];
    for (ashape, xshape, ls) in configs {
        let mut os = xshape.clone();
        *os.last_mut().expect("rank >= 2") = ls[0];
        let c = uniform(rng, &os, -1.0, 1.0);
        out.push(Case {
            kernel: "diffusion_conv",
            shape: format!("A{ashape:?} X{xshape:?} Λ{ls:?}"),
            store: params(vec![
                ("a", uniform(rng, &ashape, 0.1, 1.0)),
                ("x", uniform(rng, &xshape, -1.0, 1.0)),
                ("lambda", uniform(rng, &ls, -1.0, 1.0)),
            ]),
            forward: Box::new(move |g, s| {
                let (a, x, l) = (g.param(s, "a")?, g.param(s, "x")?, g.param(s, "lambda")?);
                let y = g.diffusion_conv(a, x, l)?;
                head(g, y, &c)
            }),
        });
    }
}

fn structural_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) {
    for dims in [vec![1, 3], vec![4, 4], vec![2, 3, 5]] {
        let c = uniform(rng, &dims, -1.0, 1.0);
        out.push(Case {
            kernel: "softmax_rows",
            shape: shape_str(&dims),
            store: params(vec![("x", uniform(rng, &dims, -2.0, 2.0))]),
            forward: Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let y = g.softmax_rows(x)?;
                head(g, y, &c)
            }),
        });
    }
    for (b, n, d) in [(1, 2, 1), (2, 3, 2), (1, 4, 3)] {
        let c = uniform(rng, &[b, n, n, 2 * d], -1.0, 1.0);
        out.push(Case {
            kernel: "concat_pairs",
            shape: format!("[{b}, {n}, {d}]"),
            store: params(vec![("e", uniform(rng, &[b, n, d], -1.0, 1.0))]),
            forward: Box::new(move |g, s| {
                let e = g.param(s, "e")?;
                let y = g.concat_pairs(e)?;
                head(g, y, &c)
            }),
        });
        let c = uniform(rng, &[b, n, n], -1.0, 1.0);
        out.push(Case {
            kernel: "pair_scores",
            shape: format!("[{b}, {n}, {d}]"),
            store: params(vec![
                ("e", uniform(rng, &[b, n, d], -1.0, 1.0)),
                ("w", uniform(rng, &[2 * d, 1], -1.0, 1.0)),
                ("b", uniform(rng, &[1], -1.0, 1.0)),
            ]),
            forward: Box::new(move |g, s| {
                let (e, w, bias) = (g.param(s, "e")?, g.param(s, "w")?, g.param(s, "b")?);
                let y = g.pair_scores(e, w, bias)?;
                head(g, y, &c)
            }),
        });
    }
    for dims in [vec![2, 3], vec![1, 4, 2], vec![2, 2, 3]] {
        let mut swapped = dims.clone();
        let k = swapped.len();
        swapped.swap(k - 2, k - 1);
        let flat = vec![dims.iter().product::<usize>()];
        let c = uniform(rng, &flat, -1.0, 1.0);
        out.push(Case {
            kernel: "reshape+swap_last_axes",
            shape: shape_str(&dims),
            store: params(vec![("x", uniform(rng, &dims, -1.0, 1.0))]),
            forward: Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let t = g.swap_last_axes(x)?;
                let t2 = g.mul_const(t, &Tensor::new(swapped.clone(), c.values().to_vec())?)?;
                let r = g.reshape(t2, &flat)?;
                let sq = g.mul_const(r, &c)?;
                g.sum(sq)
            }),
        });
    }
}

fn probabilistic_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) {
    for (n, d) in [(1, 1), (3, 2), (2, 4)] {
        let noise = uniform(rng, &[n, d], -1.5, 1.5);
        let c = uniform(rng, &[n, d], -1.0, 1.0);
        out.push(Case {
            kernel: "reparameterize",
            shape: format!("[{n}, {d}]"),
            store: params(vec![("m", uniform(rng, &[n, d], -1.0, 1.0)), ("lv", uniform(rng, &[n, d], -1.0, 1.0))]),
            forward: Box::new(move |g, s| {
                let (m, lv) = (g.param(s, "m")?, g.param(s, "lv")?);
                let z = g.reparameterize(m, lv, &noise)?;
                head(g, z, &c)
            }),
        });
        for broadcast in [true, false] {
            let ps = if broadcast { vec![d] } else { vec![n, d] };
            out.push(Case {
                kernel: "gaussian_kl",
                shape: format!("q[{n}, {d}] p{ps:?}"),
                store: params(vec![
                    ("qm", uniform(rng, &[n, d], -1.0, 1.0)),
                    ("qlv", uniform(rng, &[n, d], -1.0, 1.0)),
                    ("pm", uniform(rng, &ps, -1.0, 1.0)),
                    ("plv", uniform(rng, &ps, -1.0, 1.0)),
                ]),
                forward: Box::new(move |g, s| {
                    let (a, b) = (g.param(s, "qm")?, g.param(s, "qlv")?);
                    let (c, d) = (g.param(s, "pm")?, g.param(s, "plv")?);
                    g.gaussian_kl(a, b, c, d)
                }),
            });
        }
    }
    for (n, k, d) in [(2, 2, 1), (5, 3, 2), (4, 4, 3)] {
        out.push(Case {
            kernel: "soft_assign",
            shape: format!("z[{n}, {d}] mu[{k}, {d}]"),
            store: params(vec![("z", uniform(rng, &[n, d], -1.0, 1.0)), ("mu", uniform(rng, &[k, d], -1.0, 1.0))]),
            forward: {
                let c = uniform(rng, &[n, k], -1.0, 1.0);
                Box::new(move |g, s| {
                    let (z, mu) = (g.param(s, "z")?, g.param(s, "mu")?);
                    let q = g.soft_assign(z, mu)?;
                    head(g, q, &c)
                })
            },
        });
        // target rows with one zero entry exercise the skipped-term branch
        let mut p = uniform(rng, &[n, k], 0.1, 1.0);
        for (i, row) in p.values_mut().chunks_mut(k).enumerate() {
            row[i % k] = 0.0;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        out.push(Case {
            kernel: "kl_from_target",
            shape: format!("[{n}, {k}]"),
            store: params(vec![("logits", uniform(rng, &[n, k], -1.0, 1.0))]),
            forward: Box::new(move |g, s| {
                let l = g.param(s, "logits")?;
                let q = g.softmax_rows(l)?;
                g.kl_from_target(q, &p)
            }),
        });
    }
}

fn composite_cases(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<Case>) -> Result<()> {
    // mixture of predictor experts under the prediction loss
    let (b, n, t, k) = (2, 4, 4, 2);
    let experts: Vec<PredictorExpert> = (0..k).map(|i| PredictorExpert::new(i, t, t, 3, 1)).collect();
    let mut store = ParamStore::new();
    for e in &experts {
        e.init(&mut store, rng)?;
    }
    offset_biases(&mut store, rng);
    let x = uniform(rng, &[b, n, t], -1.0, 1.0);
    let y = uniform(rng, &[b, n, t], -1.0, 1.0);
    let gate_w = uniform(rng, &[n, k], 0.1, 1.0);
    let mut gw = gate_w.values().to_vec();
    for row in gw.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let gate = GatingWeights { node_ids: (0..n as u64).collect(), weights: Tensor::new(vec![n, k], gw)? };
    let gumbel: Vec<Option<Tensor<f64>>> = (0..k).map(|_| Some(uniform(rng, &[b, n, n], -0.5, 0.5))).collect();
    out.push(Case {
        kernel: "predictor mixture loss",
        shape: format!("x[{b}, {n}, {t}] K={k}"),
        store,
        forward: Box::new(move |g, s| {
            let xv = g.constant(x.clone())?;
            let p = moe_predict(g, s, &experts, &gate, xv, &gumbel)?;
            prediction_loss(g, p, &y)
        }),
    });

    // single reconstructor ELBO
    let expert = VaeExpert::new(0, 6, [5, 4], 2);
    let mut store = ParamStore::new();
    expert.init(&mut store, rng)?;
    offset_biases(&mut store, rng);
    let weeks = uniform(rng, &[3, 6], -1.0, 1.0);
    let noise: Tensor<f64> = normal_noise(rng, 3, 2);
    out.push(Case {
        kernel: "reconstructor ELBO",
        shape: "x[3, 6] d_z=2".into(),
        store,
        forward: Box::new(move |g, s| vae_elbo(g, s, &expert, &weeks, &noise)),
    });

    // grouped ELBO across experts, as in consolidation
    let vaes: Vec<VaeExpert> = (0..2).map(|i| VaeExpert::new(i, 5, [4, 3], 2)).collect();
    let mut store = ParamStore::new();
    for e in &vaes {
        e.init(&mut store, rng)?;
    }
    offset_biases(&mut store, rng);
    let groups = LocalizedGroups { node_ids: vec![10, 11, 12], groups: vec![vec![0, 2], vec![1]] };
    let weeks: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    out.push(Case {
        kernel: "consolidation ELBO",
        shape: "3 nodes, K=2".into(),
        store,
        forward: Box::new(move |g, s| {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
            consolidation_loss(g, s, &vaes, &groups, &weeks, &mut noise_rng)
        }),
    });

    // autoencoder reconstruction plus the clustering term
    let ae = PretrainAutoencoder::new(6, [5, 4], 2);
    let mut store = ParamStore::new();
    ae.init(&mut store, rng)?;
    offset_biases(&mut store, rng);
    store.insert(crate::cluster::CENTROIDS_PARAM, ParamGroup::PretrainReconstructor, uniform(rng, &[3, 2], -1.0, 1.0))?;
    let weeks = uniform(rng, &[4, 6], -1.0, 1.0);
    let mut p = uniform(rng, &[4, 3], 0.1, 1.0);
    for row in p.values_mut().chunks_mut(3) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out.push(Case {
        kernel: "clustering objective",
        shape: "x[4, 6] K=3".into(),
        store,
        forward: Box::new(move |g, s| {
            let (recon, z) = ae.recon_loss(g, s, &weeks)?;
            let mu = g.param(s, crate::cluster::CENTROIDS_PARAM)?;
            let q = g.soft_assign(z, mu)?;
            let kl = g.kl_from_target(q, &p)?;
            let w = g.scale(kl, 0.5)?;
            g.add(recon, w)
        }),
    });
    Ok(())
}

/// Zero-initialised biases and priors put ReLU inputs exactly on the kink
/// (all-zero windows, dead units); move them off it.
fn offset_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, p) in store.iter_mut() {
        if name.ends_with("bias") || name.contains("prior") {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.3));
        }
    }
}

/// Runs the finite-difference check on every kernel (three shapes each) and
/// on the composed predictor, reconstructor and clustering losses.
pub fn gradcheck_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    linear_cases(&mut rng, &mut cases);
    conv_cases(&mut rng, &mut cases);
    diffusion_cases(&mut rng, &mut cases);
    structural_cases(&mut rng, &mut cases);
    probabilistic_cases(&mut rng, &mut cases);
    elementwise_cases(&mut rng, &mut cases);
    composite_cases(seed, &mut rng, &mut cases)?;
    cases
        .into_iter()
        .map(|c| {
            let report = finite_difference_check(&c.store, h, tol, &c.forward)?;
            Ok(GradCheckCase { kernel: c.kernel, shape: c.shape, report })
        })
        .collect()
}

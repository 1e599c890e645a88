//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value. [`Graph::gradients`] replays the tape backwards. Parameters enter the
//! tape through [`Graph::param`], which remembers the store path so that
//! [`Graph::backward`] can accumulate into the matching [`ParamStore`] entry.
//!
//! The op vocabulary is closed: it covers exactly what the forecasting,
//! clustering and variational models in this crate need.

use std::collections::HashMap;

use super::linalg::{matmul, matmul_acc, matmul_nt_acc, matmul_tn_acc, row_normalize, row_normalize_backward, transpose};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Derivative<T> = Box<dyn Fn(T) -> T + Send + Sync>;

struct DiffusionCache<T> {
    batch: usize,
    nodes: usize,
    /// columns of the flattened signal: sequence length × input channels
    cols: usize,
    out_channels: usize,
    in_channels: usize,
    steps: usize,
    /// per batch: out-degree transition, row sums
    fwd: Vec<(Vec<T>, Vec<T>)>,
    /// per batch: in-degree transition, column sums
    bwd: Vec<(Vec<T>, Vec<T>)>,
    /// per batch: powers `P^m X` for m = 0..=M
    fwd_powers: Vec<Vec<Vec<T>>>,
    /// per batch: powers `Q^m X` for m = 0..=M
    bwd_powers: Vec<Vec<Vec<T>>>,
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, k: Var, b: Option<Var> },
    Pad1d { x: Var, left: usize, right: usize },
    Diffusion { a: Var, x: Var, lambda: Var, cache: Box<DiffusionCache<T>> },
    SoftmaxRows { x: Var },
    Reparam { mean: Var, log_var: Var, noise: Vec<T> },
    GaussianKl { qm: Var, qlv: Var, pm: Var, plv: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddConst { x: Var },
    MulConst { x: Var, c: Vec<T> },
    Sum { x: Var },
    AbsErrSum { x: Var, target: Vec<T> },
    SqErrSum { x: Var, target: Vec<T> },
    ConcatPairs { e: Var },
    PairScores { e: Var, w: Var, b: Var },
    Reshape { x: Var },
    SwapLastAxes { x: Var },
    SoftAssign { z: Var, mu: Var },
    KlFromTarget { q: Var, p: Vec<T> },
    Map { x: Var, df: Derivative<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<String>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Forward tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Shorthand for the single value of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.values()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "constant")
    }

    /// Leaf bound to the store entry `name`. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.tensor(name)?;
        let mut value = t.clone();
        value.set_grad(None)?;
        let v = self.push(value, Op::Leaf, name)?;
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn vals(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.values()
    }

    /// `out[.., j] = Σ_i x[.., i]·w[i, j] + b[j]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(dim_err(format!("linear weight must be rank 2, got {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        if xs.last().copied() != Some(din) {
            return Err(dim_err(format!("linear input {xs:?} does not end in {din}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err(format!("linear bias {:?} != [{dout}]", self.shape(b))));
            }
        }
        let rows = self.vals(x).len() / din;
        let mut out = matmul(self.vals(x), self.vals(w), rows, din, dout);
        if let Some(b) = b {
            let bv = self.vals(b);
            for r in out.chunks_mut(dout) {
                for (o, &bb) in r.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, "linear")
    }

    /// Stride-1 cross-correlation without padding.
    /// `x: [batch, c_in, len]`, `k: [c_out, c_in, width]`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 3 || xs[1] != ks[1] {
            return Err(dim_err(format!("conv1d input {xs:?} incompatible with kernel {ks:?}")));
        }
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, width) = (ks[0], ks[2]);
        if len < width {
            return Err(dim_err(format!("conv1d length {len} shorter than kernel {width}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err("conv1d bias shape"));
            }
        }
        let lout = len - width + 1;
        let xv = self.vals(x);
        let kv = self.vals(k);
        let mut out = vec![T::zero(); batch * cout * lout];
        for bi in 0..batch {
            for o in 0..cout {
                let orow = &mut out[(bi * cout + o) * lout..(bi * cout + o + 1) * lout];
                if let Some(b) = b {
                    let bv = self.nodes[b.0].value.values()[o];
                    orow.iter_mut().for_each(|v| *v = bv);
                }
                for c in 0..cin {
                    let xrow = &xv[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                    for j in 0..width {
                        let kw = kv[(o * cin + c) * width + j];
                        for (ov, &xv) in orow.iter_mut().zip(&xrow[j..j + lout]) {
                            *ov += kw * xv;
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(vec![batch, cout, lout], out)?, Op::Conv1d { x, k, b }, "conv1d")
    }

    /// Zero padding on the last axis.
    pub fn pad_last(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().ok_or_else(|| dim_err("pad on rank-0 tensor"))?;
        let new_len = len + left + right;
        let rows = self.vals(x).len() / len.max(1);
        let mut out = vec![T::zero(); rows * new_len];
        for (r, src) in self.vals(x).chunks(len.max(1)).enumerate().take(rows) {
            out[r * new_len + left..r * new_len + left + len].copy_from_slice(src);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = new_len;
        self.push(Tensor::new(shape, out)?, Op::Pad1d { x, left, right }, "pad")
    }

    /// Bidirectional diffusion convolution over a weighted directed graph.
    ///
    /// `a` is `[N, N]` or `[B, N, N]`; `x` is `[.., N, D]` or `[.., N, L, D]`
    /// (the same transitions act on every one of the `L` positions);
    /// `lambda` is `[D', D, M, 2]`. Output replaces `D` with `D'`.
    ///
    /// `H[:, q] = Σ_p Σ_{m=1..M} (Λ[q,p,m,0]·(D_O⁻¹A)^m + Λ[q,p,m,1]·(D_I⁻¹Aᵀ)^m) X[:, p]`
    pub fn diffusion_conv(&mut self, a: Var, x: Var, lambda: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let xs = self.shape(x).to_vec();
        let ls = self.shape(lambda).to_vec();
        let (batch, n) = match as_.as_slice() {
            [r, c] if r == c => (1, *r),
            [b, r, c] if r == c => (*b, *r),
            _ => return Err(dim_err(format!("adjacency must be square, got {as_:?}"))),
        };
        let batched = as_.len() == 3;
        let core = if batched {
            if xs.first() != Some(&batch) {
                return Err(dim_err(format!("signal {xs:?} batch does not match adjacency {as_:?}")));
            }
            &xs[1..]
        } else {
            &xs[..]
        };
        let (len, din) = match core {
            [nn, d] if *nn == n => (1, *d),
            [nn, l, d] if *nn == n => (*l, *d),
            _ => return Err(dim_err(format!("signal {xs:?} incompatible with {n} nodes"))),
        };
        if ls.len() != 4 || ls[1] != din || ls[3] != 2 || ls[2] == 0 {
            return Err(dim_err(format!("diffusion weights {ls:?} must be [D', {din}, M>=1, 2]")));
        }
        let (dout, steps) = (ls[0], ls[2]);
        let cols = len * din;
        let av = self.vals(a);
        let xv = self.vals(x);
        let lv = self.vals(lambda);
        if av.iter().any(|&v| v < T::zero()) {
            return Err(Error::Invariant("adjacency entries must be non-negative".into()));
        }
        let mut out = vec![T::zero(); batch * n * len * dout];
        let mut cache = DiffusionCache {
            batch,
            nodes: n,
            cols,
            out_channels: dout,
            in_channels: din,
            steps,
            fwd: Vec::with_capacity(batch),
            bwd: Vec::with_capacity(batch),
            fwd_powers: Vec::with_capacity(batch),
            bwd_powers: Vec::with_capacity(batch),
        };
        for bi in 0..batch {
            let ab = &av[bi * n * n..(bi + 1) * n * n];
            let (p, rs) = row_normalize(ab, n, n).map_err(|i| Error::DegenerateDegree(format!("row {i} of adjacency sums to zero")))?;
            let at = transpose(ab, n, n);
            let (q, cs) = row_normalize(&at, n, n).map_err(|i| Error::DegenerateDegree(format!("column {i} of adjacency sums to zero")))?;
            let x0 = xv[bi * n * cols..(bi + 1) * n * cols].to_vec();
            let mut fp = vec![x0.clone()];
            let mut bp = vec![x0];
            for m in 1..=steps {
                let f = matmul(&p, &fp[m - 1], n, n, cols);
                let b = matmul(&q, &bp[m - 1], n, n, cols);
                fp.push(f);
                bp.push(b);
            }
            let ob = &mut out[bi * n * len * dout..(bi + 1) * n * len * dout];
            for m in 1..=steps {
                for node in 0..n {
                    for l in 0..len {
                        let base = node * cols + l * din;
                        let srow = &fp[m][base..base + din];
                        let rrow = &bp[m][base..base + din];
                        let orow = &mut ob[(node * len + l) * dout..(node * len + l + 1) * dout];
                        for (qi, o) in orow.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for pi in 0..din {
                                let w = ((qi * din + pi) * steps + (m - 1)) * 2;
                                acc += lv[w] * srow[pi] + lv[w + 1] * rrow[pi];
                            }
                            *o += acc;
                        }
                    }
                }
            }
            cache.fwd.push((p, rs));
            cache.bwd.push((q, cs));
            cache.fwd_powers.push(fp);
            cache.bwd_powers.push(bp);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push(Tensor::new(shape, out)?, Op::Diffusion { a, x, lambda, cache: Box::new(cache) }, "diffusion_conv")
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        t.ensure_finite("softmax_rows input")?;
        let c = t.last_dim();
        let mut out = t.values().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { x }, "softmax_rows")
    }

    /// `z = mean + exp(0.5·log_var) ⊙ noise`
    pub fn reparameterize(&mut self, mean: Var, log_var: Var, noise: &Tensor<T>) -> Result<Var> {
        let ms = self.shape(mean).to_vec();
        if self.shape(log_var) != ms.as_slice() || noise.shape() != ms.as_slice() {
            return Err(dim_err("reparameterize shapes must match"));
        }
        let out: Vec<T> = self
            .vals(mean)
            .iter()
            .zip(self.vals(log_var))
            .zip(noise.values())
            .map(|((&m, &lv), &e)| m + (T::of(0.5) * lv).exp() * e)
            .collect();
        let noise = noise.values().to_vec();
        self.push(Tensor::new(ms, out)?, Op::Reparam { mean, log_var, noise }, "reparameterize")
    }

    /// Closed-form `KL(q ‖ p)` between diagonal Gaussians, summed to a scalar.
    ///
    /// `p` may either match `q` element-wise or hold a single row that is
    /// broadcast over every leading row of `q`.
    pub fn gaussian_kl(&mut self, qm: Var, qlv: Var, pm: Var, plv: Var) -> Result<Var> {
        let qn = self.vals(qm).len();
        let pn = self.vals(pm).len();
        if self.vals(qlv).len() != qn || self.vals(plv).len() != pn || pn == 0 || !qn.is_multiple_of(pn) {
            return Err(dim_err("gaussian_kl shapes"));
        }
        if pn != qn && self.nodes[qm.0].value.last_dim() != pn {
            return Err(dim_err("gaussian_kl broadcast must be over rows"));
        }
        let (a, b, c, d) = (self.vals(qm), self.vals(qlv), self.vals(pm), self.vals(plv));
        let mut kl = T::zero();
        for i in 0..qn {
            let j = i % pn;
            let diff = c[j] - a[i];
            kl += (b[i] - d[j]).exp() + diff * diff * (-d[j]).exp() - T::one() + d[j] - b[i];
        }
        kl *= T::of(0.5);
        self.push(Tensor::scalar(kl), Op::GaussianKl { qm, qlv, pm, plv }, "gaussian_kl")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu { x }, "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add { a, b }, "add")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.nodes[x.0].value.map(|v| v * c);
        self.push(t, Op::Scale { x, c }, "scale")
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(dim_err("add_const shape"));
        }
        let out: Vec<T> = self.vals(x).iter().zip(c.values()).map(|(&a, &b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddConst { x }, "add_const")
    }

    /// `x ⊙ c` for a constant tensor `c` of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(dim_err("mul_const shape"));
        }
        let out: Vec<T> = self.vals(x).iter().zip(c.values()).map(|(&a, &b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::MulConst { x, c: c.values().to_vec() }, "mul_const")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.vals(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.vals(x).len().max(1);
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `Σ |x − target|`
    pub fn abs_err_sum(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        if self.vals(x).len() != target.len() {
            return Err(dim_err("abs_err_sum shape"));
        }
        let s: T = self.vals(x).iter().zip(target.values()).map(|(&a, &b)| (a - b).abs()).sum();
        self.push(Tensor::scalar(s), Op::AbsErrSum { x, target: target.values().to_vec() }, "abs_err_sum")
    }

    /// Mean absolute error against a constant target.
    pub fn mae(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let s = self.abs_err_sum(x, target)?;
        self.scale(s, T::one() / T::of(target.len().max(1) as f64))
    }

    /// `Σ (x − target)²`
    pub fn sq_err_sum(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        if self.vals(x).len() != target.len() {
            return Err(dim_err("sq_err_sum shape"));
        }
        let s: T = self.vals(x).iter().zip(target.values()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.push(Tensor::scalar(s), Op::SqErrSum { x, target: target.values().to_vec() }, "sq_err_sum")
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let s = self.sq_err_sum(x, target)?;
        self.scale(s, T::one() / T::of(target.len().max(1) as f64))
    }

    /// All ordered pairs of rows: `[.., N, d] → [.., N, N, 2d]` with
    /// `out[.., i, j, :] = [e_i ; e_j]`.
    pub fn concat_pairs(&mut self, e: Var) -> Result<Var> {
        let es = self.shape(e).to_vec();
        if es.len() < 2 {
            return Err(dim_err("concat_pairs needs rank >= 2"));
        }
        let d = es[es.len() - 1];
        let n = es[es.len() - 2];
        let outer = self.vals(e).len() / (n * d).max(1);
        let ev = self.vals(e);
        let mut out = vec![T::zero(); outer * n * n * 2 * d];
        for b in 0..outer {
            let eb = &ev[b * n * d..(b + 1) * n * d];
            for i in 0..n {
                for j in 0..n {
                    let o = ((b * n + i) * n + j) * 2 * d;
                    out[o..o + d].copy_from_slice(&eb[i * d..(i + 1) * d]);
                    out[o + d..o + 2 * d].copy_from_slice(&eb[j * d..(j + 1) * d]);
                }
            }
        }
        let mut shape = es[..es.len() - 1].to_vec();
        shape.push(n);
        shape.push(2 * d);
        self.push(Tensor::new(shape, out)?, Op::ConcatPairs { e }, "concat_pairs")
    }

    /// Scores of all ordered row pairs through a `[2d, 1]` linear map:
    /// `[.., N, d] → [.., N, N]` with `out[.., i, j] = w·[e_i ; e_j] + b`.
    /// Equals `linear(concat_pairs(e), w, b)` without the `N²·2d` intermediate.
    pub fn pair_scores(&mut self, e: Var, w: Var, b: Var) -> Result<Var> {
        let es = self.shape(e).to_vec();
        if es.len() < 2 {
            return Err(dim_err("pair_scores needs rank >= 2"));
        }
        let d = es[es.len() - 1];
        let n = es[es.len() - 2];
        if self.shape(w) != [2 * d, 1] || self.shape(b) != [1] {
            return Err(dim_err(format!("pair_scores weight {:?} / bias {:?} for embedding width {d}", self.shape(w), self.shape(b))));
        }
        let (u, v) = pair_halves(self.vals(e), self.vals(w), d);
        let bias = self.vals(b)[0];
        let outer = u.len() / n.max(1);
        let mut out = Vec::with_capacity(outer * n * n);
        for bi in 0..outer {
            let vb = &v[bi * n..(bi + 1) * n];
            for &ui in &u[bi * n..(bi + 1) * n] {
                out.extend(vb.iter().map(|&vj| ui + vj + bias));
            }
        }
        let mut shape = es[..es.len() - 1].to_vec();
        shape.push(n);
        self.push(Tensor::new(shape, out)?, Op::PairScores { e, w, b }, "pair_scores")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape { x }, "reshape")
    }

    /// Swaps the last two axes.
    pub fn swap_last_axes(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(dim_err("swap_last_axes needs rank >= 2"));
        }
        let (r, c) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let out: Vec<T> = self.vals(x).chunks(r * c).flat_map(|blk| transpose(blk, r, c)).collect();
        let mut shape = xs;
        let k = shape.len();
        shape.swap(k - 2, k - 1);
        self.push(Tensor::new(shape, out)?, Op::SwapLastAxes { x }, "swap_last_axes")
    }

    /// Student's t (one degree of freedom) soft assignment of rows of `z`
    /// (`[N, d]`) to centroids `mu` (`[K, d]`).
    pub fn soft_assign(&mut self, z: Var, mu: Var) -> Result<Var> {
        let zs = self.shape(z).to_vec();
        let ms = self.shape(mu).to_vec();
        if zs.len() != 2 || ms.len() != 2 || zs[1] != ms[1] {
            return Err(dim_err(format!("soft_assign {zs:?} vs {ms:?}")));
        }
        let q = crate::cluster::student_t_assignments(self.vals(z), self.vals(mu), zs[0], ms[0], zs[1]);
        self.push(Tensor::new(vec![zs[0], ms[0]], q)?, Op::SoftAssign { z, mu }, "soft_assign")
    }

    /// `Σ p·ln(p/q)` for a constant target `p`; zero-probability entries of
    /// `p` contribute nothing.
    pub fn kl_from_target(&mut self, q: Var, p: &Tensor<T>) -> Result<Var> {
        if self.shape(q) != p.shape() {
            return Err(dim_err("kl_from_target shape"));
        }
        let mut s = T::zero();
        for (&qv, &pv) in self.vals(q).iter().zip(p.values()) {
            if pv > T::zero() {
                s += pv * (pv / qv).ln();
            }
        }
        self.push(Tensor::scalar(s), Op::KlFromTarget { q, p: p.values().to_vec() }, "kl_from_target")
    }

    /// Element-wise map with a caller-supplied derivative.
    pub fn map(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T + Send + Sync + 'static) -> Result<Var> {
        let t = self.nodes[x.0].value.map(f);
        self.push(t, Op::Map { x, df: Box::new(df) }, "map")
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(dim_err("loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads })
    }

    /// Reverse sweep, accumulating parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
                store.get_mut(name)?.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = g.len() / dout;
                let mut dx = vec![T::zero(); rows * din];
                matmul_nt_acc(g, self.vals(*w), &mut dx, rows, dout, din);
                let mut dw = vec![T::zero(); din * dout];
                matmul_tn_acc(self.vals(*x), g, &mut dw, rows, din, dout);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for r in g.chunks(dout) {
                        db.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Conv1d { x, k, b } => {
                let xs = self.shape(*x);
                let ks = self.shape(*k);
                let (batch, cin, len) = (xs[0], xs[1], xs[2]);
                let (cout, width) = (ks[0], ks[2]);
                let lout = len - width + 1;
                let xv = self.vals(*x);
                let kv = self.vals(*k);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut db = vec![T::zero(); cout];
                for bi in 0..batch {
                    for o in 0..cout {
                        let grow = &g[(bi * cout + o) * lout..(bi * cout + o + 1) * lout];
                        db[o] += grow.iter().copied().sum();
                        for c in 0..cin {
                            let xoff = (bi * cin + c) * len;
                            for j in 0..width {
                                let kidx = (o * cin + c) * width + j;
                                let kw = kv[kidx];
                                let xs = &xv[xoff + j..xoff + j + lout];
                                let s: T = grow.iter().zip(xs).map(|(&gv, &x)| gv * x).sum();
                                for (d, &gv) in dx[xoff + j..xoff + j + lout].iter_mut().zip(grow) {
                                    *d += gv * kw;
                                }
                                dk[kidx] += s;
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *k, dk);
                if let Some(b) = b {
                    acc(grads, *b, db);
                }
            }
            Op::Pad1d { x, left, right } => {
                let len = self.nodes[x.0].value.last_dim();
                let new_len = len + left + right;
                let mut dx = Vec::with_capacity(self.vals(*x).len());
                for r in g.chunks(new_len) {
                    dx.extend_from_slice(&r[*left..*left + len]);
                }
                acc(grads, *x, dx);
            }
            Op::Diffusion { a, x, lambda, cache } => {
                let (da, dx, dl) = self.diffusion_backward(g, self.vals(*lambda), cache);
                acc(grads, *a, da);
                acc(grads, *x, dx);
                acc(grads, *lambda, dl);
            }
            Op::SoftmaxRows { x } => {
                let y = node.value.values();
                let c = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Reparam { mean, log_var, noise } => {
                let lv = self.vals(*log_var);
                let dlv = g.iter().zip(lv).zip(noise).map(|((&gv, &l), &e)| gv * e * T::of(0.5) * (T::of(0.5) * l).exp()).collect();
                acc(grads, *mean, g.to_vec());
                acc(grads, *log_var, dlv);
            }
            Op::GaussianKl { qm, qlv, pm, plv } => {
                let s = g[0];
                let (a, b, c, d) = (self.vals(*qm), self.vals(*qlv), self.vals(*pm), self.vals(*plv));
                let pn = c.len();
                let half = T::of(0.5);
                let mut dqm = vec![T::zero(); a.len()];
                let mut dqlv = vec![T::zero(); a.len()];
                let mut dpm = vec![T::zero(); pn];
                let mut dplv = vec![T::zero(); pn];
                for i in 0..a.len() {
                    let j = i % pn;
                    let inv_p = (-d[j]).exp();
                    let diff = c[j] - a[i];
                    let ratio = (b[i] - d[j]).exp();
                    dqm[i] = -s * diff * inv_p;
                    dpm[j] += s * diff * inv_p;
                    dqlv[i] = s * half * (ratio - T::one());
                    dplv[j] += s * half * (T::one() - ratio - diff * diff * inv_p);
                }
                acc(grads, *qm, dqm);
                acc(grads, *qlv, dqlv);
                acc(grads, *pm, dpm);
                acc(grads, *plv, dplv);
            }
            Op::Relu { x } => {
                let dx = self.vals(*x).iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                acc(grads, *x, dx);
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Scale { x, c } => acc(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::AddConst { x } => acc(grads, *x, g.to_vec()),
            Op::MulConst { x, c } => acc(grads, *x, g.iter().zip(c).map(|(&a, &b)| a * b).collect()),
            Op::Sum { x } => acc(grads, *x, vec![g[0]; self.vals(*x).len()]),
            Op::AbsErrSum { x, target } => {
                let dx = self
                    .vals(*x)
                    .iter()
                    .zip(target)
                    .map(|(&a, &b)| {
                        let r = a - b;
                        if r > T::zero() {
                            g[0]
                        } else if r < T::zero() {
                            -g[0]
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(grads, *x, dx);
            }
            Op::SqErrSum { x, target } => {
                let two = T::of(2.0);
                let dx = self.vals(*x).iter().zip(target).map(|(&a, &b)| g[0] * two * (a - b)).collect();
                acc(grads, *x, dx);
            }
            Op::ConcatPairs { e } => {
                let es = self.shape(*e);
                let d = es[es.len() - 1];
                let n = es[es.len() - 2];
                let mut de = vec![T::zero(); self.vals(*e).len()];
                let outer = de.len() / (n * d).max(1);
                for b in 0..outer {
                    for i in 0..n {
                        for j in 0..n {
                            let o = ((b * n + i) * n + j) * 2 * d;
                            for t in 0..d {
                                de[(b * n + i) * d + t] += g[o + t];
                                de[(b * n + j) * d + t] += g[o + d + t];
                            }
                        }
                    }
                }
                acc(grads, *e, de);
            }
            Op::PairScores { e, w, b } => {
                let es = self.shape(*e);
                let d = es[es.len() - 1];
                let n = es[es.len() - 2];
                let (ev, wv) = (self.vals(*e), self.vals(*w));
                let rows = ev.len() / d.max(1);
                // row and column sums of the incoming gradient
                let mut gu = vec![T::zero(); rows];
                let mut gv = vec![T::zero(); rows];
                for bi in 0..rows / n.max(1) {
                    for i in 0..n {
                        let grow = &g[(bi * n + i) * n..(bi * n + i + 1) * n];
                        gu[bi * n + i] = grow.iter().copied().sum();
                        for (acc, &x) in gv[bi * n..(bi + 1) * n].iter_mut().zip(grow) {
                            *acc += x;
                        }
                    }
                }
                let (w1, w2) = wv.split_at(d);
                let mut de = vec![T::zero(); ev.len()];
                let mut dw = vec![T::zero(); 2 * d];
                for r in 0..rows {
                    let er = &ev[r * d..(r + 1) * d];
                    for t in 0..d {
                        de[r * d + t] = gu[r] * w1[t] + gv[r] * w2[t];
                        dw[t] += gu[r] * er[t];
                        dw[d + t] += gv[r] * er[t];
                    }
                }
                let db = g.iter().copied().sum::<T>();
                acc(grads, *e, de);
                acc(grads, *w, dw);
                acc(grads, *b, vec![db]);
            }
            Op::Reshape { x } => acc(grads, *x, g.to_vec()),
            Op::SwapLastAxes { x } => {
                let xs = self.shape(*x);
                let (r, c) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                // the output block is c×r; transposing it back gives r×c
                let dx = g.chunks(r * c).flat_map(|blk| transpose(blk, c, r)).collect();
                acc(grads, *x, dx);
            }
            Op::SoftAssign { z, mu } => {
                let zs = self.shape(*z);
                let (n, d) = (zs[0], zs[1]);
                let k = self.shape(*mu)[0];
                let (zv, mv) = (self.vals(*z), self.vals(*mu));
                let q = node.value.values();
                let mut dz = vec![T::zero(); zv.len()];
                let mut dmu = vec![T::zero(); mv.len()];
                for i in 0..n {
                    let zi = &zv[i * d..(i + 1) * d];
                    let mut t = Vec::with_capacity(k);
                    for c in 0..k {
                        let dist: T = zi.iter().zip(&mv[c * d..(c + 1) * d]).map(|(&a, &b)| (a - b) * (a - b)).sum();
                        t.push(T::one() / (T::one() + dist));
                    }
                    let total: T = t.iter().copied().sum();
                    let gr = &g[i * k..(i + 1) * k];
                    let qr = &q[i * k..(i + 1) * k];
                    let dot: T = gr.iter().zip(qr).map(|(&a, &b)| a * b).sum();
                    for c in 0..k {
                        let dt = (gr[c] - dot) / total;
                        // dt/d(dist) = -t²
                        let ddist = -dt * t[c] * t[c];
                        for j in 0..d {
                            let diff = zi[j] - mv[c * d + j];
                            let v = T::of(2.0) * ddist * diff;
                            dz[i * d + j] += v;
                            dmu[c * d + j] -= v;
                        }
                    }
                }
                acc(grads, *z, dz);
                acc(grads, *mu, dmu);
            }
            Op::KlFromTarget { q, p } => {
                let dq = self.vals(*q).iter().zip(p).map(|(&qv, &pv)| -g[0] * pv / qv).collect();
                acc(grads, *q, dq);
            }
            Op::Map { x, df } => {
                let dx = self.vals(*x).iter().zip(g).map(|(&v, &gv)| gv * df(v)).collect();
                acc(grads, *x, dx);
            }
        }
        Ok(())
    }

    fn diffusion_backward(&self, g: &[T], lv: &[T], c: &DiffusionCache<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (n, cols, din, dout, steps) = (c.nodes, c.cols, c.in_channels, c.out_channels, c.steps);
        let len = cols / din;
        let mut da = vec![T::zero(); c.batch * n * n];
        let mut dx = vec![T::zero(); c.batch * n * cols];
        let mut dl = vec![T::zero(); lv.len()];
        for bi in 0..c.batch {
            let gb = &g[bi * n * len * dout..(bi + 1) * n * len * dout];
            // direct gradients on each power, and on Λ
            let mut ds_f = vec![vec![T::zero(); n * cols]; steps + 1];
            let mut ds_b = vec![vec![T::zero(); n * cols]; steps + 1];
            for m in 1..=steps {
                let fp = &c.fwd_powers[bi][m];
                let bp = &c.bwd_powers[bi][m];
                for node in 0..n {
                    for l in 0..len {
                        let base = node * cols + l * din;
                        let grow = &gb[(node * len + l) * dout..(node * len + l + 1) * dout];
                        for (qi, &gv) in grow.iter().enumerate() {
                            if gv == T::zero() {
                                continue;
                            }
                            for pi in 0..din {
                                let w = ((qi * din + pi) * steps + (m - 1)) * 2;
                                dl[w] += gv * fp[base + pi];
                                dl[w + 1] += gv * bp[base + pi];
                                ds_f[m][base + pi] += gv * lv[w];
                                ds_b[m][base + pi] += gv * lv[w + 1];
                            }
                        }
                    }
                }
            }
            let (p, rs) = &c.fwd[bi];
            let (q, cs) = &c.bwd[bi];
            let mut dp = vec![T::zero(); n * n];
            let mut dq = vec![T::zero(); n * n];
            let mut carry_f = vec![T::zero(); n * cols];
            let mut carry_b = vec![T::zero(); n * cols];
            for m in (1..=steps).rev() {
                // S_m = P · S_{m-1}
                let gf: Vec<T> = ds_f[m].iter().zip(&carry_f).map(|(&a, &b)| a + b).collect();
                matmul_nt_acc(&gf, &c.fwd_powers[bi][m - 1], &mut dp, n, cols, n);
                carry_f = vec![T::zero(); n * cols];
                matmul_tn_acc(p, &gf, &mut carry_f, n, n, cols);
                let gb2: Vec<T> = ds_b[m].iter().zip(&carry_b).map(|(&a, &b)| a + b).collect();
                matmul_nt_acc(&gb2, &c.bwd_powers[bi][m - 1], &mut dq, n, cols, n);
                carry_b = vec![T::zero(); n * cols];
                matmul_tn_acc(q, &gb2, &mut carry_b, n, n, cols);
            }
            let dxb = &mut dx[bi * n * cols..(bi + 1) * n * cols];
            for ((d, &f), &b) in dxb.iter_mut().zip(&carry_f).zip(&carry_b) {
                *d = f + b;
            }
            let dab = &mut da[bi * n * n..(bi + 1) * n * n];
            let from_p = row_normalize_backward(&dp, p, rs, n);
            let from_q = row_normalize_backward(&dq, q, cs, n);
            for i in 0..n {
                for j in 0..n {
                    dab[i * n + j] = from_p[i * n + j] + from_q[j * n + i];
                }
            }
        }
        (da, dx, dl)
    }
}

/// Per-row projections onto both halves of a `[2d, 1]` pair weight.
fn pair_halves<T: Scalar>(e: &[T], w: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let (w1, w2) = w.split_at(d);
    e.chunks(d.max(1))
        .map(|r| {
            let u = r.iter().zip(w1).map(|(&a, &b)| a * b).sum::<T>();
            let v = r.iter().zip(w2).map(|(&a, &b)| a * b).sum::<T>();
            (u, v)
        })
        .unzip()
}

/// Graph-free evaluation of a rank-2 linear map, used by oracles and tests.
pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], rows: usize, din: usize, dout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * dout];
    for r in out.chunks_mut(dout) {
        r.copy_from_slice(b);
    }
    matmul_acc(x, w, &mut out, rows, din, dout);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(g: &mut Graph<f64>, shape: &[usize], v: &[f64]) -> Var {
        g.constant(Tensor::new(shape.to_vec(), v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let (x, w, b) = (c(&mut g, &[1, 2], &[3.0, 5.0]), c(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]), c(&mut g, &[2], &[0.0, 0.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).values(), [3.0, 5.0]);
        let (x, w, b) = (c(&mut g, &[1, 1], &[3.0]), c(&mut g, &[1, 1], &[2.0]), c(&mut g, &[1], &[1.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).values(), [7.0]);
        let tall = c(&mut g, &[2, 1], &[1.0, 1.0]);
        assert!(matches!(g.linear(x, tall, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1d_examples() {
        let mut g = Graph::new();
        let (x, k) = (c(&mut g, &[1, 1, 2], &[5.0, 7.0]), c(&mut g, &[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, k, None).unwrap();
        assert_eq!(g.value(y).values(), [5.0, 7.0]);
        let (x, k) = (c(&mut g, &[1, 1, 3], &[1.0, 2.0, 3.0]), c(&mut g, &[1, 1, 2], &[1.0, 1.0]));
        let y = g.conv1d(x, k, None).unwrap();
        assert_eq!(g.value(y).shape(), [1, 1, 2]);
        assert_eq!(g.value(y).values(), [3.0, 5.0]);
        let short = c(&mut g, &[1, 1, 1], &[1.0]);
        assert!(matches!(g.conv1d(short, k, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn pad_then_conv_keeps_length() {
        let mut g = Graph::new();
        let x = c(&mut g, &[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let p = g.pad_last(x, 1, 1).unwrap();
        assert_eq!(g.value(p).values(), [0.0, 1.0, 2.0, 3.0, 4.0, 0.0]);
        let k = c(&mut g, &[1, 1, 3], &[1.0, 1.0, 1.0]);
        let y = g.conv1d(p, k, None).unwrap();
        assert_eq!(g.value(y).values(), [3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn diffusion_examples() {
        let mut g = Graph::new();
        let a = c(&mut g, &[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let x = c(&mut g, &[2, 1], &[1.0, 3.0]);
        let lam = c(&mut g, &[1, 1, 1, 2], &[1.0, 0.0]);
        let h = g.diffusion_conv(a, x, lam).unwrap();
        assert_eq!(g.value(h).values(), [3.0, 1.0]);

        // D_O^{-1}A for [[0,2],[1,0]] is the swap; D_I^{-1}Aᵀ likewise
        let a = c(&mut g, &[2, 2], &[0.0, 2.0, 1.0, 0.0]);
        let h = g.diffusion_conv(a, x, lam).unwrap();
        assert_eq!(g.value(h).values(), [3.0, 1.0]);
        let back = c(&mut g, &[1, 1, 1, 2], &[0.0, 1.0]);
        let h = g.diffusion_conv(a, x, back).unwrap();
        assert_eq!(g.value(h).values(), [3.0, 1.0]);

        let zero = c(&mut g, &[1, 1, 1, 2], &[0.0, 0.0]);
        let h = g.diffusion_conv(a, x, zero).unwrap();
        assert_eq!(g.value(h).values(), [0.0, 0.0]);
    }

    #[test]
    fn diffusion_rejects_degenerate_degrees() {
        let mut g = Graph::new();
        let a = c(&mut g, &[2, 2], &[0.0, 1.0, 0.0, 0.0]);
        let x = c(&mut g, &[2, 1], &[1.0, 3.0]);
        let lam = c(&mut g, &[1, 1, 1, 2], &[1.0, 0.0]);
        assert!(matches!(g.diffusion_conv(a, x, lam), Err(Error::DegenerateDegree(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = c(&mut g, &[3, 2], &[0.0, 0.0, 3f64.ln(), 0.0, 1000.0, 0.0]);
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s).values();
        assert_eq!(v[..2], [0.5, 0.5]);
        assert_abs_diff_eq!(v[2], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(v[3], 0.25, epsilon = 1e-15);
        assert_eq!(v[4], 1.0);
        assert!(v[5].is_finite() && v[5] < 1e-300);
    }

    #[test]
    fn reparameterize_examples() {
        let mut g = Graph::new();
        let (m, lv) = (c(&mut g, &[2], &[2.0, -1.0]), c(&mut g, &[2], &[0.0, 4.0]));
        let z = g.reparameterize(m, lv, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(g.value(z).values(), [2.0, -1.0]);
        let z = g.reparameterize(m, lv, &Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(g.value(z).values()[0], 3.0);
        assert_abs_diff_eq!(g.value(z).values()[1], -1.0 + 2f64.exp(), epsilon = 1e-12);
    }

    #[test]
    fn gaussian_kl_examples() {
        let mut g = Graph::new();
        let z0 = c(&mut g, &[1], &[0.0]);
        let one = c(&mut g, &[1], &[1.0]);
        let kl = g.gaussian_kl(z0, z0, z0, z0).unwrap();
        assert_eq!(g.scalar(kl), 0.0);
        let kl = g.gaussian_kl(z0, z0, one, z0).unwrap();
        assert_abs_diff_eq!(g.scalar(kl), 0.5, epsilon = 1e-15);
        // log-variance 1 means variance e
        let kl = g.gaussian_kl(z0, one, z0, z0).unwrap();
        assert_abs_diff_eq!(g.scalar(kl), 0.5 * (1f64.exp() - 2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(g.scalar(kl), 0.3591, epsilon = 1e-4);
    }

    #[test]
    fn gaussian_kl_broadcasts_prior_rows() {
        let mut g = Graph::new();
        let qm = c(&mut g, &[2, 2], &[0.0, 1.0, 0.5, -0.5]);
        let qlv = c(&mut g, &[2, 2], &[0.1, -0.2, 0.3, 0.0]);
        let (pm, plv) = (c(&mut g, &[2], &[0.2, 0.1]), c(&mut g, &[2], &[0.5, -0.5]));
        let kl = g.gaussian_kl(qm, qlv, pm, plv).unwrap();
        let pm2 = c(&mut g, &[2, 2], &[0.2, 0.1, 0.2, 0.1]);
        let plv2 = c(&mut g, &[2, 2], &[0.5, -0.5, 0.5, -0.5]);
        let full = g.gaussian_kl(qm, qlv, pm2, plv2).unwrap();
        assert_abs_diff_eq!(g.scalar(kl), g.scalar(full), epsilon = 1e-15);
        let bad = c(&mut g, &[3], &[0.0; 3]);
        assert!(g.gaussian_kl(qm, qlv, bad, bad).is_err());
    }

    #[test]
    fn mae_value_and_gradient() {
        let mut g = Graph::new();
        let p = c(&mut g, &[2], &[1.0, 2.5]);
        let target = Tensor::new(vec![2], vec![3.0, 2.0]).unwrap();
        let l = g.mae(p, &target).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 1.25);
        let grads = g.gradients(l).unwrap();
        assert_eq!(grads.get(p).unwrap(), [-0.5, 0.5]);
        let own = g.value(p).clone();
        let same = g.mae(p, &own).unwrap();
        assert_eq!(g.scalar(same), 0.0);
    }

    #[test]
    fn pair_scores_match_concat_then_linear() {
        let mut g = Graph::new();
        let e = c(&mut g, &[2, 3, 2], &[0.1, -0.4, 0.7, 0.2, -0.3, 0.9, 1.0, 0.0, -1.0, 0.5, 0.25, 0.75]);
        let w = c(&mut g, &[4, 1], &[0.3, -0.2, 0.5, 0.8]);
        let b = c(&mut g, &[1], &[0.05]);
        let fused = g.pair_scores(e, w, b).unwrap();
        let pairs = g.concat_pairs(e).unwrap();
        let lin = g.linear(pairs, w, Some(b)).unwrap();
        assert_eq!(g.value(fused).shape(), [2, 3, 3]);
        for (a, b) in g.value(fused).values().iter().zip(g.value(lin).values()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn swap_last_axes_transposes_each_block() {
        let mut g = Graph::new();
        let x = c(&mut g, &[2, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let y = g.swap_last_axes(x).unwrap();
        assert_eq!(g.value(y).shape(), [2, 3, 2]);
        assert_eq!(g.value(y).values(), [1.0, 4.0, 2.0, 5.0, 3.0, 6.0, 7.0, 10.0, 8.0, 11.0, 9.0, 12.0]);
    }

    #[test]
    fn shared_parameter_accumulates_both_paths() {
        let mut store = ParamStore::new();
        store.insert("w", crate::nn::ParamGroup::Predictor, Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        assert_eq!(g.param(&store, "w").unwrap(), w);
        let sq = g.map(w, |v| v * v, |v| 2.0 * v).unwrap();
        let s = g.add(sq, w).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.tensor("w").unwrap().grad().unwrap(), [5.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = c(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(g.gradients(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_precision_forward() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![3f32.ln(), 0.0]).unwrap()).unwrap();
        let s = g.softmax_rows(x).unwrap();
        assert!((g.value(s).values()[0] - 0.75).abs() < 1e-6);
    }
}

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamGroup, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Uniform Glorot initialisation for a tensor with the given fan-in/fan-out.
pub fn glorot<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), values).expect("shape product matches")
}

/// Affine map stored as `{prefix}.weight` (`[d_in, d_out]`) and `{prefix}.bias`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearLayer {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        LinearLayer { weight: format!("{prefix}.weight"), bias: format!("{prefix}.bias"), d_in, d_out }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, group: ParamGroup, rng: &mut R) -> Result<()> {
        store.insert(&self.weight, group, glorot(rng, &[self.d_in, self.d_out], self.d_in, self.d_out))?;
        store.insert(&self.bias, group, Tensor::zeros(&[self.d_out]))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        g.linear(x, w, Some(b))
    }
}

/// Stack of linear layers with ReLU between consecutive layers (none after the last).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

impl Mlp {
    /// `widths = [d_in, h1, .., d_out]`
    pub fn new(prefix: &str, widths: &[usize]) -> Self {
        let layers = widths.windows(2).enumerate().map(|(i, w)| LinearLayer::new(&format!("{prefix}.{i}"), w[0], w[1])).collect();
        Mlp { layers }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, group: ParamGroup, rng: &mut R) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, group, rng))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.d_in)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }
}

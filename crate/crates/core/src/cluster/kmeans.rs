use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KMeansFit<T> {
    /// `[K, d]`
    pub centroids: Tensor<T>,
    pub labels: Vec<usize>,
    pub inertia: T,
    pub iterations: usize,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<T: Scalar>(point: &[T], centroids: &[T], d: usize) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, mu) in centroids.chunks(d).enumerate() {
        let dist = sq_dist(point, mu);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

fn plus_plus<T: Scalar>(points: &[T], n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(&points[i * d..(i + 1) * d], &centroids[..d]).as_f64()).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        };
        let c = pick * d..(pick + 1) * d;
        centroids.extend_from_slice(&points[c.clone()]);
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(&points[i * d..(i + 1) * d], &points[c.clone()]).as_f64());
        }
    }
    centroids
}

fn lloyd<T: Scalar>(points: &[T], n: usize, d: usize, mut centroids: Vec<T>) -> KMeansFit<T> {
    let k = centroids.len() / d;
    let mut labels = vec![0; n];
    let mut iterations = 0;
    for it in 0..KMEANS_MAX_ITERS {
        iterations = it + 1;
        for (i, l) in labels.iter_mut().enumerate() {
            *l = nearest(&points[i * d..(i + 1) * d], &centroids, d).0;
        }
        let mut sums = vec![T::zero(); k * d];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for j in 0..d {
                sums[l * d + j] += points[i * d + j];
            }
        }
        let mut shift = T::zero();
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] == 0 {
                continue;
            }
            let inv = T::one() / T::of(counts[c] as f64);
            for j in 0..d {
                let v = sums[c * d + j] * inv;
                let delta = v - centroids[c * d + j];
                shift += delta * delta;
                centroids[c * d + j] = v;
            }
        }
        if shift.sqrt() <= T::of(KMEANS_TOL) {
            break;
        }
    }
    for (i, l) in labels.iter_mut().enumerate() {
        *l = nearest(&points[i * d..(i + 1) * d], &centroids, d).0;
    }
    let inertia = (0..n).map(|i| sq_dist(&points[i * d..(i + 1) * d], &centroids[labels[i] * d..(labels[i] + 1) * d])).sum();
    KMeansFit { centroids: Tensor::new(vec![k, d], centroids).expect("k×d"), labels, inertia, iterations }
}

/// k-means++ seeding and Lloyd iterations, best of [`KMEANS_RESTARTS`] by inertia.
pub fn kmeans<T: Scalar>(points: &Tensor<T>, k: usize, seed: u64) -> Result<KMeansFit<T>> {
    if points.rank() != 2 {
        return Err(Error::Dimension("k-means expects [N, d] points".into()));
    }
    let (n, d) = (points.shape()[0], points.shape()[1]);
    if k == 0 || n < k {
        return Err(Error::Config(format!("k-means needs 1 <= K <= N, got K={k}, N={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit<T>> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus(points.values(), n, d, k, &mut rng);
        let fit = lloyd(points.values(), n, d, init);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Initial centroids `[K, d]` for the clustering stage.
pub fn kmeans_init<T: Scalar>(latents: &Tensor<T>, k: usize, seed: u64) -> Result<Tensor<T>> {
    Ok(kmeans(latents, k, seed)?.centroids)
}

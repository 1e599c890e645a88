use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::reconstructor::{sample_prior, VaeExpert};
use crate::scalar::Scalar;

/// Week vectors decoded from the previous task's expert priors.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWeekSet<T> {
    pub weeks: Vec<Vec<T>>,
    /// Originating expert of each week.
    pub experts: Vec<usize>,
}

impl<T> SyntheticWeekSet<T> {
    pub fn empty() -> Self {
        SyntheticWeekSet { weeks: Vec::new(), experts: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.weeks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weeks.is_empty()
    }

    pub fn counts(&self, k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for &e in &self.experts {
            c[e] += 1;
        }
        c
    }
}

/// `⌊n_s/K⌋` per expert, the remainder one each to the lowest indices.
pub fn sample_counts(n_s: usize, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    (0..k).map(|i| n_s / k + usize::from(i < n_s % k)).collect()
}

/// Draws `n_s` synthetic weeks from the (frozen) experts in `store`.
pub fn forgetting_resilient_sampling<T: Scalar, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    experts: &[VaeExpert],
    n_s: usize,
    rng: &mut R,
) -> Result<SyntheticWeekSet<T>> {
    let mut out = SyntheticWeekSet::empty();
    for (e, count) in experts.iter().zip(sample_counts(n_s, experts.len())) {
        for w in sample_prior(store, e, count, rng)? {
            out.weeks.push(w);
            out.experts.push(e.index);
        }
    }
    Ok(out)
}

/// Time-of-week aligned slices of synthetic weeks.
#[derive(Clone, Debug, PartialEq)]
pub struct SynchronizedSlices<T> {
    /// `[B, S, T′]`
    pub x: Tensor<T>,
    /// `[B, S, T]`
    pub y: Tensor<T>,
}

/// For each `t` in `last_input_offsets`, slices every week to
/// `x = week[t−T′+1 ..= t]`, `y = week[t+1 ..= t+T]`, wrapping around the week.
pub fn synchronize_samples<T: Scalar>(
    weeks: &[Vec<T>],
    last_input_offsets: &[usize],
    input_steps: usize,
    output_steps: usize,
) -> Result<SynchronizedSlices<T>> {
    let spw = weeks.first().map_or(1, Vec::len);
    if weeks.iter().any(|w| w.len() != spw || w.is_empty()) {
        return Err(Error::Dimension("synthetic weeks must share a non-zero length".into()));
    }
    let (b, s) = (last_input_offsets.len(), weeks.len());
    let mut x = Vec::with_capacity(b * s * input_steps);
    let mut y = Vec::with_capacity(b * s * output_steps);
    for &t in last_input_offsets {
        for w in weeks {
            let base = t + spw * (input_steps / spw + 1) + 1 - input_steps;
            x.extend((0..input_steps).map(|j| w[(base + j) % spw]));
            y.extend((1..=output_steps).map(|j| w[(t + j) % spw]));
        }
    }
    Ok(SynchronizedSlices { x: Tensor::new(vec![b, s, input_steps], x)?, y: Tensor::new(vec![b, s, output_steps], y)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_remainder_counts() {
        assert_eq!(sample_counts(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(sample_counts(0, 3), vec![0, 0, 0]);
        assert_eq!(sample_counts(2, 3), vec![1, 1, 0]);
    }

    #[test]
    fn wraparound_at_offset_zero() {
        let w = vec![vec![0.0, 1.0, 2.0, 3.0, 4.0]];
        let s = synchronize_samples(&w, &[0], 2, 2).unwrap();
        assert_eq!(s.x.values(), &[4.0, 0.0]);
        assert_eq!(s.y.values(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_week_gives_constant_slices() {
        let w = vec![vec![7.0; 6], vec![-1.0; 6]];
        let s = synchronize_samples(&w, &[5, 2, 3], 4, 3).unwrap();
        assert_eq!(s.x.shape(), &[3, 2, 4]);
        for (i, chunk) in s.x.values().chunks(4).enumerate() {
            assert!(chunk.iter().all(|&v| v == if i % 2 == 0 { 7.0 } else { -1.0 }));
        }
        assert!(s.y.values().chunks(3).enumerate().all(|(i, c)| c.iter().all(|&v| v == [7.0, -1.0][i % 2])));
    }

    #[test]
    fn slices_match_modular_indexing() {
        let week: Vec<f64> = (0..10).map(f64::from).collect();
        let s = synchronize_samples(&[week], &[8], 3, 4).unwrap();
        assert_eq!(s.x.values(), &[6.0, 7.0, 8.0]);
        assert_eq!(s.y.values(), &[9.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn empty_request_is_empty() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let set = forgetting_resilient_sampling::<f64, _>(&ParamStore::new(), &[], 0, &mut rng).unwrap();
        assert!(set.is_empty());
    }
}

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::types::{NodePanel, NormStats, SplitRanges, TaskDataset, WeekMatrix, WindowBatch};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// 6:2:2 split of `len` bins; boundaries are floors of 0.6·len and 0.8·len.
/// The train portion must hold at least `min_train` bins.
pub fn split_protocol(len: usize, min_train: usize) -> Result<SplitRanges> {
    let train_end = len * 6 / 10;
    let val_end = len * 8 / 10;
    if train_end < min_train {
        return Err(Error::Protocol(format!("series of {len} bins leaves {train_end} training bins, need at least {min_train}")));
    }
    Ok(SplitRanges { train: 0..train_end, val: train_end..val_end, test: val_end..len })
}

/// Split for a task, requiring room for one week plus one input/target window
/// inside the training portion.
pub fn split_task(task: &TaskDataset, input_steps: usize, output_steps: usize) -> Result<SplitRanges> {
    split_protocol(task.len(), task.steps_per_week() + input_steps + output_steps)
}

/// Population mean/std over the given series restricted to `range`.
pub fn fit_normalizer<'a>(series: impl IntoIterator<Item = &'a [f64]>, range: Range<usize>) -> Result<NormStats> {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut rows = Vec::new();
    for s in series {
        let r = s.get(range.clone()).ok_or_else(|| Error::Protocol(format!("range {range:?} outside series")))?;
        n += r.len();
        sum += r.iter().sum::<f64>();
        rows.push(r);
    }
    if n == 0 {
        return Err(Error::Protocol("normalizer fitted on an empty selection".into()));
    }
    let mean = sum / n as f64;
    let var = rows.iter().flat_map(|r| r.iter()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(NormStats::new(mean, var.sqrt()))
}

/// Normalized copies of the given raw series.
pub fn normalize_panel<'a>(node_ids: &[u64], series: impl IntoIterator<Item = &'a [f64]>, norm: &NormStats) -> NodePanel {
    NodePanel { node_ids: node_ids.to_vec(), rows: series.into_iter().map(|s| s.iter().map(|&v| norm.normalize(v)).collect()).collect() }
}

/// First bin of the first Monday at or after `from`, given the weekday of bin 0.
pub fn first_monday(from: usize, start_weekday: u8, steps_per_day: usize) -> usize {
    let spw = 7 * steps_per_day;
    let monday0 = ((7 - start_weekday as usize % 7) % 7) * steps_per_day;
    if from <= monday0 {
        monday0
    } else {
        monday0 + (from - monday0).div_ceil(spw) * spw
    }
}

/// Locates the first full Monday-to-Sunday week inside `train`.
pub fn week_start(train: &Range<usize>, start_weekday: u8, steps_per_day: usize) -> Result<usize> {
    let start = first_monday(train.start, start_weekday, steps_per_day);
    if start + 7 * steps_per_day > train.end {
        return Err(Error::Protocol(format!("no full Monday-start week inside training range {train:?}")));
    }
    Ok(start)
}

/// Normalized week vectors of `nodes`, read through `flow`.
pub fn extract_week<'a, F>(
    nodes: &[u64],
    mut flow: F,
    train: &Range<usize>,
    start_weekday: u8,
    steps_per_day: usize,
    norm: &NormStats,
) -> Result<WeekMatrix>
where
    F: FnMut(u64) -> Result<&'a [f64]>,
{
    let spw = 7 * steps_per_day;
    let start = week_start(train, start_weekday, steps_per_day)?;
    let rows = nodes
        .iter()
        .map(|&n| Ok(flow(n)?[start..start + spw].iter().map(|&v| norm.normalize(v)).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(WeekMatrix { node_ids: nodes.to_vec(), start_bin: start, steps_per_week: spw, rows })
}

/// Week vectors for a whole task, reading the dataset directly.
pub fn extract_task_week(task: &TaskDataset, nodes: &[u64], train: &Range<usize>, norm: &NormStats) -> Result<WeekMatrix> {
    extract_week(nodes, |n| task.flow(n), train, task.start_weekday, task.steps_per_day, norm)
}

/// Number of input/target windows that fit in a range of `len` bins.
pub fn window_count(len: usize, input_steps: usize, output_steps: usize) -> usize {
    (len + 1).saturating_sub(input_steps + output_steps)
}

/// All windows inside `range`: input = bins `[s, s+T′)`, target = `[s+T′, s+T′+T)`.
///
/// Window order is shuffled with `shuffle_seed` when given; the last batch may
/// be short. `week_anchor` is the absolute bin at which week offsets are zero.
#[allow(clippy::too_many_arguments)]
pub fn make_windows(
    panel: &NodePanel,
    range: Range<usize>,
    input_steps: usize,
    output_steps: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    week_anchor: usize,
    steps_per_week: usize,
) -> Result<Vec<WindowBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if range.end > panel.len() {
        return Err(Error::Protocol(format!("range {range:?} exceeds series length {}", panel.len())));
    }
    let count = window_count(range.len(), input_steps, output_steps);
    let mut starts: Vec<usize> = (0..count).map(|i| range.start + i).collect();
    if let Some(seed) = shuffle_seed {
        starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let n = panel.num_nodes();
    let mut batches = Vec::new();
    for chunk in starts.chunks(batch_size) {
        let b = chunk.len();
        let mut x = Vec::with_capacity(b * n * input_steps);
        let mut y = Vec::with_capacity(b * n * output_steps);
        for &s in chunk {
            for row in &panel.rows {
                x.extend_from_slice(&row[s..s + input_steps]);
                y.extend_from_slice(&row[s + input_steps..s + input_steps + output_steps]);
            }
        }
        let week_offsets = chunk.iter().map(|&s| (s as i64 - week_anchor as i64).rem_euclid(steps_per_week as i64) as usize).collect();
        batches.push(WindowBatch {
            x: Tensor::new(vec![b, n, input_steps], x)?,
            y: Tensor::new(vec![b, n, output_steps], y)?,
            starts: chunk.to_vec(),
            week_offsets,
        });
    }
    Ok(batches)
}

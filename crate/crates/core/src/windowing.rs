//! Synchronizing variable-rate modality streams onto a common window grid.
//!
//! Windows start on a global grid `0, τ_m, 2τ_m, ...`; a sample at time `s`
//! belongs to the window starting at `t` when `t <= s < t + τ_m`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RatingSeries;
use crate::tensor::Tensor;
use crate::Modality;

/// Tolerance for grid arithmetic on decimal periods.
const GRID_EPS: f64 = 1e-9;

/// Timestamped feature vectors of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStream {
    pub modality: Modality,
    dim: usize,
    timestamps: Vec<f64>,
    values: Vec<f64>,
}

impl ModalityStream {
    pub fn new(modality: Modality, dim: usize) -> Self {
        ModalityStream {
            modality,
            dim,
            timestamps: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_samples(modality: Modality, dim: usize, samples: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        let mut s = Self::new(modality, dim);
        for (t, v) in samples {
            s.push(t, &v)?;
        }
        Ok(s)
    }

    /// Appends a sample; timestamps must be non-decreasing.
    pub fn push(&mut self, t: f64, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Data(format!(
                "{} sample at {t}s has {} values, expected {}",
                self.modality,
                v.len(),
                self.dim
            )));
        }
        if !t.is_finite() || self.timestamps.last().is_some_and(|last| t < *last) {
            return Err(Error::Data(format!("{} timestamps must be non-decreasing (at {t}s)", self.modality)));
        }
        self.timestamps.push(t);
        self.values.extend_from_slice(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Index range of samples with `start <= t < end`.
    pub fn range(&self, start: f64, end: f64) -> std::ops::Range<usize> {
        let lo = self.timestamps.partition_point(|t| *t < start);
        let hi = self.timestamps.partition_point(|t| *t < end);
        lo..hi
    }
}

/// Number of whole windows of width `tau` in `duration` seconds.
pub fn window_count(duration: f64, tau: f64) -> usize {
    (duration / tau + GRID_EPS).floor().max(0.0) as usize
}

/// Window widths and per-modality stack sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    /// Common output window in seconds.
    pub tau: f64,
    pub tau_m: BTreeMap<Modality, f64>,
    pub n_max: BTreeMap<Modality, usize>,
}

impl Default for WindowPlan {
    fn default() -> Self {
        WindowPlan {
            tau: 1.0,
            tau_m: [
                (Modality::Visual, 1.0),
                (Modality::Acoustic, 1.0),
                (Modality::Linguistic, 5.0),
            ]
            .into_iter()
            .collect(),
            n_max: BTreeMap::new(),
        }
    }
}

impl WindowPlan {
    pub fn tau_for(&self, m: Modality) -> f64 {
        self.tau_m.get(&m).copied().unwrap_or(self.tau)
    }

    /// How many common windows one window of `m` spans.
    pub fn ratio(&self, m: Modality) -> Result<usize> {
        let r = self.tau_for(m) / self.tau;
        let rounded = r.round();
        if rounded < 1.0 || (r - rounded).abs() > GRID_EPS {
            return Err(Error::Config(format!(
                "window width of {m} ({}s) is not a multiple of {}s",
                self.tau_for(m),
                self.tau
            )));
        }
        Ok(rounded as usize)
    }

    pub fn n_max_for(&self, m: Modality) -> Result<usize> {
        self.n_max
            .get(&m)
            .copied()
            .ok_or_else(|| Error::Config(format!("no stack size planned for modality {m}")))
    }

    /// Fills `n_max` from a corpus, never below `min_columns`.
    pub fn fit<'a>(
        &mut self,
        clips: impl IntoIterator<Item = (&'a BTreeMap<Modality, ModalityStream>, f64)> + Clone,
        min_columns: usize,
    ) -> Result<()> {
        for m in Modality::ALL {
            let streams = clips
                .clone()
                .into_iter()
                .filter_map(|(s, d)| s.get(&m).map(|st| (st, d)));
            match compute_n_max(m, streams, self.tau_for(m)) {
                Ok(n) => {
                    self.n_max.insert(m, n.max(min_columns).max(1));
                }
                Err(Error::MissingModality(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if self.n_max.is_empty() {
            return Err(Error::Data("corpus has no modality streams".into()));
        }
        Ok(())
    }
}

/// Largest number of samples of `modality` falling in any grid window of width `tau_m`.
pub fn compute_n_max<'a>(
    modality: Modality,
    streams: impl IntoIterator<Item = (&'a ModalityStream, f64)>,
    tau_m: f64,
) -> Result<usize> {
    let mut seen = false;
    let mut best = 0;
    for (stream, duration) in streams {
        seen = true;
        let n_windows = (duration / tau_m - GRID_EPS).ceil().max(0.0) as usize;
        for j in 0..n_windows {
            let t = j as f64 * tau_m;
            best = best.max(stream.range(t, t + tau_m).len());
        }
    }
    if !seen {
        return Err(Error::MissingModality(modality));
    }
    Ok(best)
}

/// Stacks the samples in `[t, t + tau_m)` column-wise into a `dim × n_max` matrix.
///
/// Short windows repeat their last sample; an empty window repeats the most
/// recent earlier sample, or is all zeros when there is none.
pub fn stack_window(stream: &ModalityStream, t: f64, tau_m: f64, n_max: usize) -> Tensor {
    let dim = stream.dim();
    let mut out = Tensor::zeros(&[dim, n_max]);
    let range = stream.range(t, t + tau_m);
    let picks: Vec<usize> = if range.is_empty() {
        match range.start.checked_sub(1) {
            Some(prev) => vec![prev; n_max],
            None => return out,
        }
    } else {
        let last = range.end - 1;
        range.clone().take(n_max).chain(std::iter::repeat(last)).take(n_max).collect()
    };
    let data = out.data_mut();
    for (col, &i) in picks.iter().enumerate() {
        for (r, v) in stream.sample(i).iter().enumerate() {
            data[r * n_max + col] = *v;
        }
    }
    out
}

/// Repeats every item `factor` times, in order.
pub fn oversample<T: Clone>(items: &[T], factor: usize) -> Vec<T> {
    items
        .iter()
        .flat_map(|e| std::iter::repeat_n(e.clone(), factor))
        .collect()
}

/// Five-fold repetition turning 5-second linguistic windows into 1-second ones.
pub fn oversample_linguistic<T: Clone>(embeddings: &[T]) -> Vec<T> {
    oversample(embeddings, 5)
}

/// Source-window index for each of `n_windows` common windows when one
/// source window spans `ratio` common windows.
pub fn oversample_index(n_windows: usize, ratio: usize) -> Vec<usize> {
    (0..n_windows).map(|t| t / ratio).collect()
}

/// Averages ratings into windows of width `tau`, then truncates or extends
/// (repeating the last value) to `n_windows`.
pub fn align_ratings(r: &RatingSeries, tau: f64, n_windows: usize) -> Result<RatingSeries> {
    if r.is_empty() {
        return Err(Error::Data("cannot align an empty rating series".into()));
    }
    let n_buckets = r.values.iter().enumerate().map(|(i, _)| bucket(r.timestamp(i), tau)).max().unwrap_or(0) + 1;
    let mut sums = vec![0.0; n_buckets];
    let mut counts = vec![0usize; n_buckets];
    for (i, v) in r.values.iter().enumerate() {
        let b = bucket(r.timestamp(i), tau);
        sums[b] += v;
        counts[b] += 1;
    }
    let mut values = Vec::with_capacity(n_windows);
    let mut last = r.values[0];
    for w in 0..n_windows {
        if w < n_buckets && counts[w] > 0 {
            last = sums[w] / counts[w] as f64;
        }
        values.push(last);
    }
    Ok(RatingSeries::new(tau, values))
}

fn bucket(t: f64, tau: f64) -> usize {
    (t / tau + GRID_EPS).floor().max(0.0) as usize
}

/// Window stacks of one modality for one clip, with the mapping from common
/// windows to source windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedModality {
    pub modality: Modality,
    /// `n_source × dim × n_max`.
    pub windows: Tensor,
    /// Source window of each common window.
    pub index: Vec<usize>,
}

/// Builds the window stacks of `stream` covering `n_windows` common windows.
pub fn window_stream(stream: &ModalityStream, plan: &WindowPlan, n_windows: usize) -> Result<WindowedModality> {
    let m = stream.modality;
    let tau_m = plan.tau_for(m);
    let ratio = plan.ratio(m)?;
    let n_max = plan.n_max_for(m)?;
    let n_source = n_windows.div_ceil(ratio);
    let dim = stream.dim();
    let mut data = Vec::with_capacity(n_source * dim * n_max);
    for j in 0..n_source {
        data.extend_from_slice(stack_window(stream, j as f64 * tau_m, tau_m, n_max).data());
    }
    Ok(WindowedModality {
        modality: m,
        windows: Tensor::new(vec![n_source, dim, n_max], data)?,
        index: oversample_index(n_windows, ratio),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(samples: &[(f64, f64)]) -> ModalityStream {
        ModalityStream::from_samples(Modality::Linguistic, 1, samples.iter().map(|(t, v)| (*t, vec![*v])).collect())
            .unwrap()
    }

    #[test]
    fn rejects_bad_samples() {
        let mut s = ModalityStream::new(Modality::Visual, 2);
        assert!(s.push(0.0, &[1.0]).is_err());
        s.push(1.0, &[1.0, 2.0]).unwrap();
        assert!(s.push(0.5, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn n_max_is_max_over_windows() {
        // Counts [3, 5, 4] in three 1-s windows.
        let mut samples = Vec::new();
        for (w, n) in [3usize, 5, 4].iter().enumerate() {
            for i in 0..*n {
                samples.push((w as f64 + i as f64 / 10.0, 0.0));
            }
        }
        let s = stream(&samples);
        assert_eq!(compute_n_max(Modality::Linguistic, [(&s, 3.0)], 1.0).unwrap(), 5);
        let one = stream(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(compute_n_max(Modality::Linguistic, [(&one, 3.0)], 1.0).unwrap(), 1);
        assert!(compute_n_max(Modality::Linguistic, std::iter::empty(), 1.0).is_err());
    }

    #[test]
    fn stack_window_cases() {
        let s = stream(&[(0.0, 1.0), (0.5, 2.0)]);
        assert_eq!(stack_window(&s, 0.0, 1.0, 2).data(), &[1.0, 2.0]);
        let single = stream(&[(0.2, 7.0)]);
        assert_eq!(stack_window(&single, 0.0, 1.0, 3).data(), &[7.0, 7.0, 7.0]);
        let gap = stream(&[(0.2, 4.0), (3.1, 9.0)]);
        assert_eq!(stack_window(&gap, 1.0, 1.0, 2).data(), &[4.0, 4.0]);
        let late = stream(&[(3.1, 9.0)]);
        assert_eq!(stack_window(&late, 0.0, 1.0, 2).data(), &[0.0, 0.0]);
        // More samples than columns keeps the earliest ones.
        let many = stream(&[(0.0, 1.0), (0.1, 2.0), (0.2, 3.0)]);
        assert_eq!(stack_window(&many, 0.0, 1.0, 2).data(), &[1.0, 2.0]);
    }

    #[test]
    fn stack_window_is_row_per_feature() {
        let s = ModalityStream::from_samples(
            Modality::Visual,
            2,
            vec![(0.0, vec![1.0, 10.0]), (0.5, vec![2.0, 20.0])],
        )
        .unwrap();
        let w = stack_window(&s, 0.0, 1.0, 3);
        assert_eq!(w.shape(), &[2, 3]);
        assert_eq!(w.data(), &[1.0, 2.0, 2.0, 10.0, 20.0, 20.0]);
    }

    #[test]
    fn oversampling() {
        assert_eq!(oversample_linguistic(&["e1"]), vec!["e1"; 5]);
        assert!(oversample_linguistic::<u8>(&[]).is_empty());
        let two = oversample_linguistic(&[1, 2]);
        assert_eq!(two.len(), 10);
        assert!(two[..5].iter().all(|v| *v == 1));
        assert_eq!(oversample_index(7, 5), vec![0, 0, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn align_ratings_cases() {
        let r = RatingSeries::new(0.5, vec![0.2, 0.4]);
        let a = align_ratings(&r, 1.0, 1).unwrap();
        assert!((a.values[0] - 0.3).abs() < 1e-15);
        let c = RatingSeries::new(0.5, vec![0.1; 8]);
        assert_eq!(align_ratings(&c, 1.0, 4).unwrap().values, vec![0.1; 4]);
        let extend = align_ratings(&RatingSeries::new(0.5, vec![0.6, 0.6, -0.2]), 1.0, 4).unwrap();
        assert_eq!(extend.values, vec![0.6, -0.2, -0.2, -0.2]);
        assert!(align_ratings(&RatingSeries::new(0.5, vec![]), 1.0, 2).is_err());
    }

    #[test]
    fn window_stream_shapes() {
        let s = stream(&[(0.1, 1.0), (0.4, 2.0), (5.2, 3.0), (6.0, 4.0)]);
        let mut plan = WindowPlan::default();
        plan.n_max.insert(Modality::Linguistic, 3);
        let w = window_stream(&s, &plan, 7).unwrap();
        assert_eq!(w.windows.shape(), &[2, 1, 3]);
        assert_eq!(w.index, vec![0, 0, 0, 0, 0, 1, 1]);
        assert_eq!(window_count(7.9, 1.0), 7);
        assert_eq!(window_count(120.0, 1.0), 120);
    }
}

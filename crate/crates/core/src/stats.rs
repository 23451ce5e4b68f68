//! Sample comparison metrics: Kolmogorov–Smirnov distances, exact 1D
//! Wasserstein-2, 2D histograms and monotonicity of 1D maps.

use thiserror::Error;

use crate::points::PointSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("non-finite value in sample")]
    NonFinite,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("axis {axis} out of range for dimension {dim}")]
    Axis { axis: usize, dim: usize },
    #[error("invalid histogram: {0}")]
    Histogram(String),
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::Empty);
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Two-sample statistic `sup |F_a − F_b|` over the empirical CDFs.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let a = sorted(a)?;
    let b = sorted(b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// One-sample statistic `sup |F_n − F|` against a continuous CDF.
pub fn ks_against_cdf(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64, StatsError> {
    let s = sorted(sample)?;
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max(((i + 1) as f64 / n - f).abs()).max((f - i as f64 / n).abs());
    }
    Ok(d)
}

/// Exact `W₂` between two 1D empirical measures via their quantile
/// functions; for equal sizes this is the sorted assignment.
pub fn w2_sorted_1d(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let a = sorted(a)?;
    let b = sorted(b)?;
    let (na, nb) = (a.len(), b.len());
    // Walk the merged breakpoints k/na and l/nb of both quantile functions
    // using integer arithmetic on the common denominator na·nb.
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ea, mut eb) = (nb, na);
    let mut prev = 0usize;
    let mut total = 0.0;
    while i < na && j < nb {
        let next = ea.min(eb);
        let diff = a[i] - b[j];
        total += diff * diff * (next - prev) as f64;
        prev = next;
        if ea == next {
            i += 1;
            ea += nb;
        }
        if eb == next {
            j += 1;
            eb += na;
        }
    }
    Ok((total / (na * nb) as f64).sqrt())
}

/// Fraction of adjacent pairs, after sorting by source value, whose
/// outputs decrease.
pub fn adjacent_inversion_fraction(sources: &[f64], outputs: &[f64]) -> Result<f64, StatsError> {
    if sources.len() != outputs.len() {
        return Err(StatsError::Length(sources.len(), outputs.len()));
    }
    if sources.len() < 2 {
        return Err(StatsError::Empty);
    }
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by(|&p, &q| sources[p].total_cmp(&sources[q]));
    let inversions = order.windows(2).filter(|w| outputs[w[1]] < outputs[w[0]]).count();
    Ok(inversions as f64 / (sources.len() - 1) as f64)
}

/// Dense 2D bin counts on a rectangle, `counts[row * nbins + col]` with
/// rows indexing the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2d {
    pub nbins: usize,
    pub axes: (usize, usize),
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub counts: Vec<u64>,
    /// Points that fell outside the rectangle.
    pub outside: u64,
}

impl Histogram2d {
    pub fn new(
        points: &PointSet,
        axes: (usize, usize),
        nbins: usize,
        lo: [f64; 2],
        hi: [f64; 2],
    ) -> Result<Self, StatsError> {
        let dim = points.dim();
        for axis in [axes.0, axes.1] {
            if axis >= dim {
                return Err(StatsError::Axis { axis, dim });
            }
        }
        if nbins == 0 {
            return Err(StatsError::Histogram("need at least one bin".into()));
        }
        if !(lo[0] < hi[0] && lo[1] < hi[1]) || lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return Err(StatsError::Histogram(format!("bad range {lo:?}..{hi:?}")));
        }
        let mut counts = vec![0u64; nbins * nbins];
        let mut outside = 0;
        let bin = |v: f64, k: usize| -> Option<usize> {
            if !(v >= lo[k] && v <= hi[k]) {
                return None;
            }
            let b = ((v - lo[k]) / (hi[k] - lo[k]) * nbins as f64).floor() as usize;
            Some(b.min(nbins - 1))
        };
        for p in points.rows() {
            match (bin(p[axes.0], 0), bin(p[axes.1], 1)) {
                (Some(r), Some(c)) => counts[r * nbins + c] += 1,
                _ => outside += 1,
            }
        }
        Ok(Self {
            nbins,
            axes,
            lo,
            hi,
            counts,
            outside,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.outside
    }

    /// Largest cell count as a fraction of all points.
    pub fn max_mass(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        *self.counts.iter().max().expect("nbins > 0") as f64 / total as f64
    }

    /// Number of cells whose mass fraction exceeds `threshold`.
    pub fn support(&self, threshold: f64) -> usize {
        let total = self.total().max(1) as f64;
        self.counts.iter().filter(|&&c| c as f64 / total > threshold).count()
    }
}

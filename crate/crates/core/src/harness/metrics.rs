use serde::{Deserialize, Serialize};

use crate::error::{FimError, Result};
use crate::estimators::{FimEstimate, Storage};

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Entries at or below this count as exact zeros in a histogram.
pub const ZERO_ATOM: f64 = 1e-300;

pub const HISTOGRAM_BINS: usize = 50;

/// `(1/dim) sum_i |est_ii - F_ii| / (F_ii + eps)` over the diagonals.
pub fn relmae(est: &FimEstimate, truth: &FimEstimate, eps: f64) -> Result<f64> {
    if est.normalization != truth.normalization {
        return Err(FimError::Incompatible(format!(
            "normalization {:?} vs {:?}",
            est.normalization, truth.normalization
        )));
    }
    if est.dim != truth.dim {
        return Err(FimError::ShapeMismatch { op: "relmae", detail: format!("dim {} vs {}", est.dim, truth.dim) });
    }
    if !(eps > 0.0) {
        return Err(FimError::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    let (e, t) = (est.diagonal(), truth.diagonal());
    let total: f64 = e.iter().zip(&t).map(|(a, f)| (a - f).abs() / (f + eps)).sum();
    Ok(total / est.dim as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    /// `HISTOGRAM_BINS + 1` edges on the log10 axis; empty when nothing is
    /// positive.
    pub log10_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub zero_atom: usize,
    pub total: usize,
    /// Fraction of entries in the zero atom.
    pub zeta: f64,
    /// Mean over all entries, zeros included.
    pub mean: f64,
    /// Median of the strictly positive entries.
    pub median: Option<f64>,
    /// 95th percentile of the strictly positive entries.
    pub p95: Option<f64>,
}

impl HistogramReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("log10_lo,log10_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.log10_edges[i], self.log10_edges[i + 1], c));
        }
        out
    }
}

/// Linear interpolation between order statistics of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn histogram(diag: &FimEstimate) -> Result<HistogramReport> {
    if diag.storage != Storage::Diagonal {
        return Err(FimError::Incompatible("histograms take diagonal estimates".into()));
    }
    let total = diag.values.len();
    let mut positive: Vec<f64> = diag.values.iter().copied().filter(|&v| v > ZERO_ATOM).collect();
    positive.sort_by(f64::total_cmp);
    let zero_atom = total - positive.len();
    let mean = if total == 0 { 0.0 } else { diag.values.iter().sum::<f64>() / total as f64 };
    let zeta = if total == 0 { 0.0 } else { zero_atom as f64 / total as f64 };

    if positive.is_empty() {
        return Ok(HistogramReport {
            log10_edges: vec![],
            counts: vec![],
            zero_atom,
            total,
            zeta,
            mean,
            median: None,
            p95: None,
        });
    }
    let (mut lo, mut hi) = (positive[0].log10(), positive[positive.len() - 1].log10());
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let log10_edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    for v in &positive {
        let bin = (((v.log10() - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    Ok(HistogramReport {
        log10_edges,
        counts,
        zero_atom,
        total,
        zeta,
        mean,
        median: Some(quantile(&positive, 0.5)),
        p95: Some(quantile(&positive, 0.95)),
    })
}

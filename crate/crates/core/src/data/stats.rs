use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingnessStats {
    /// Per-feature missing rate over the rows of the reference split.
    pub feature_rates: Vec<f64>,
    /// Per-row fraction of missing cells.
    pub instance_ratios: Vec<f64>,
    /// Largest per-row ratio.
    pub eta_max: f64,
}

pub fn instance_missing_ratio(row: &[crate::data::Cell]) -> f64 {
    if row.is_empty() {
        return 0.0;
    }
    row.iter().filter(|c| c.is_missing()).count() as f64 / row.len() as f64
}

pub fn missing_rates(train: &Dataset) -> Result<MissingnessStats> {
    if train.is_empty() {
        return Err(Error::protocol("missing_rates needs a non-empty split"));
    }
    let n = train.len() as f64;
    let mut counts = vec![0usize; train.d()];
    let mut instance_ratios = Vec::with_capacity(train.len());
    for row in &train.rows {
        for (k, c) in row.iter().enumerate() {
            if c.is_missing() {
                counts[k] += 1;
            }
        }
        instance_ratios.push(instance_missing_ratio(row));
    }
    let eta_max = instance_ratios.iter().copied().fold(0.0, f64::max);
    Ok(MissingnessStats {
        feature_rates: counts.iter().map(|&c| c as f64 / n).collect(),
        instance_ratios,
        eta_max,
    })
}

/// Share of rows whose missing ratio falls in each of `bins` equal-width bins
/// over `[0, 1]`; the last bin is closed on the right.
pub fn instance_ratio_histogram(stats: &MissingnessStats, bins: usize) -> Vec<f64> {
    let mut hist = vec![0.0; bins.max(1)];
    let n = stats.instance_ratios.len().max(1) as f64;
    for &r in &stats.instance_ratios {
        let b = ((r * hist.len() as f64) as usize).min(hist.len() - 1);
        hist[b] += 1.0 / n;
    }
    hist
}

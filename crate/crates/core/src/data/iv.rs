//! Information value (weight-of-evidence) feature ranking.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{Cell, Dataset, FeatureKind};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;
/// Added to every per-bin class count before forming distributions.
pub const SMOOTHING: f64 = 0.5;

/// Bin key: observed bins are ordered before the missing bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Bin {
    Observed(usize),
    Missing,
}

/// Assigns each cell of a column to a bin. Numerical cells use equal-frequency
/// bins over the observed values sorted by (value, row position).
fn assign_bins(column: &[Cell], kind: FeatureKind, n_bins: usize) -> Vec<Bin> {
    let mut bins = vec![Bin::Missing; column.len()];
    match kind {
        FeatureKind::Categorical => {
            for (b, c) in bins.iter_mut().zip(column) {
                if let Cell::Cat(i) = c {
                    *b = Bin::Observed(*i as usize);
                }
            }
        }
        FeatureKind::Numerical => {
            let mut observed: Vec<(f64, usize)> = column
                .iter()
                .enumerate()
                .filter_map(|(i, c)| match c {
                    Cell::Num(v) => Some((*v, i)),
                    _ => None,
                })
                .collect();
            observed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let n = observed.len();
            for (pos, &(_, i)) in observed.iter().enumerate() {
                bins[i] = Bin::Observed(pos * n_bins / n);
            }
        }
    }
    bins
}

/// IV of one column against binary labels (1 = event).
///
/// `IV = sum_b (p_good_b - p_bad_b) * ln(p_good_b / p_bad_b)` with
/// [`SMOOTHING`] added to every bin count. Missing cells form their own bin.
pub fn information_value(
    column: &[Cell],
    kind: FeatureKind,
    labels: &[f64],
    n_bins: usize,
) -> Result<f64> {
    if column.len() != labels.len() {
        return Err(Error::dimension("information_value: column/label length mismatch"));
    }
    if n_bins < 2 {
        return Err(Error::protocol("information_value needs n_bins >= 2"));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.iter().filter(|&&y| y == 0.0).count();
    if positives + negatives != labels.len() {
        return Err(Error::protocol("information_value needs 0/1 labels"));
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::protocol(
            "information_value needs both label classes present",
        ));
    }

    let bins = assign_bins(column, kind, n_bins);
    let mut counts: BTreeMap<Bin, (f64, f64)> = BTreeMap::new();
    for (b, &y) in bins.iter().zip(labels) {
        let e = counts.entry(*b).or_insert((0.0, 0.0));
        if y == 1.0 {
            e.1 += 1.0;
        } else {
            e.0 += 1.0;
        }
    }
    let good_total: f64 = counts.values().map(|c| c.0 + SMOOTHING).sum();
    let bad_total: f64 = counts.values().map(|c| c.1 + SMOOTHING).sum();
    let iv: f64 = counts
        .values()
        .map(|&(good, bad)| {
            let pg = (good + SMOOTHING) / good_total;
            let pb = (bad + SMOOTHING) / bad_total;
            (pg - pb) * (pg / pb).ln()
        })
        .sum();
    Ok(iv.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedFeature {
    pub name: String,
    pub score: f64,
    /// 1-based rank.
    pub rank: usize,
}

/// Features in descending score order; ties broken by ascending name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureRanking {
    pub features: Vec<RankedFeature>,
}

impl FeatureRanking {
    pub fn from_scores(scores: Vec<(String, f64)>) -> Self {
        let mut scores = scores;
        scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        FeatureRanking {
            features: scores
                .into_iter()
                .enumerate()
                .map(|(i, (name, score))| RankedFeature {
                    name,
                    score,
                    rank: i + 1,
                })
                .collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }
}

/// Ranks every feature of a labeled binary dataset by information value.
pub fn rank_features(ds: &Dataset, n_bins: usize) -> Result<FeatureRanking> {
    let labels = ds.labels()?;
    let scores = ds
        .schema
        .features
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let column: Vec<Cell> = ds.rows.iter().map(|r| r[k]).collect();
            information_value(&column, spec.kind, labels, n_bins).map(|s| (spec.name.clone(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureRanking::from_scores(scores))
}

/// The top `m * group_size` features (all of them if that exceeds `d`).
pub fn feature_groups(ranking: &FeatureRanking, group_size: usize, m: usize) -> Result<Vec<String>> {
    if m < 1 {
        return Err(Error::protocol("feature group index m must be >= 1"));
    }
    if group_size < 1 {
        return Err(Error::protocol("feature group size must be >= 1"));
    }
    let take = m.saturating_mul(group_size).min(ranking.features.len());
    Ok(ranking.features[..take].iter().map(|f| f.name.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn independent_feature_has_small_iv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let col: Vec<Cell> = (0..n).map(|_| Cell::Num(rng.gen::<f64>())).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let iv = information_value(&col, FeatureKind::Numerical, &y, DEFAULT_BINS).unwrap();
        assert!(iv < 0.02, "{iv}");
    }

    #[test]
    fn label_copy_matches_hand_table() {
        // 700 negatives in category 0, 300 positives in category 1.
        let mut col = vec![Cell::Cat(0); 700];
        col.extend(vec![Cell::Cat(1); 300]);
        let mut y = vec![0.0; 700];
        y.extend(vec![1.0; 300]);
        let iv = information_value(&col, FeatureKind::Categorical, &y, DEFAULT_BINS).unwrap();
        // smoothed table: good = [700.5, 0.5], bad = [0.5, 300.5]
        assert!((iv - 13.611141317925515).abs() < 1e-9, "{iv}");
    }

    #[test]
    fn all_missing_is_zero() {
        let col = vec![Cell::Missing; 50];
        let y: Vec<f64> = (0..50).map(|i| (i % 2) as f64).collect();
        assert_eq!(
            information_value(&col, FeatureKind::Numerical, &y, DEFAULT_BINS).unwrap(),
            0.0
        );
    }

    #[test]
    fn single_class_is_a_protocol_error() {
        let col = vec![Cell::Num(1.0); 5];
        assert!(matches!(
            information_value(&col, FeatureKind::Numerical, &[1.0; 5], 10),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..500).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = xs
            .iter()
            .map(|&x| if rng.gen::<f64>() < crate::numerics::sigmoid(2.0 * x) { 1.0 } else { 0.0 })
            .collect();
        let a: Vec<Cell> = xs.iter().map(|&x| Cell::Num(x)).collect();
        let b: Vec<Cell> = xs.iter().map(|&x| Cell::Num((3.0 * x).exp())).collect();
        let ia = information_value(&a, FeatureKind::Numerical, &y, 10).unwrap();
        let ib = information_value(&b, FeatureKind::Numerical, &y, 10).unwrap();
        assert_eq!(ia, ib);
        assert!(ia > 0.1);
    }

    fn ranking() -> FeatureRanking {
        FeatureRanking::from_scores(
            (0..10)
                .map(|i| (format!("f{i}"), (10 - i) as f64))
                .chain([("b_tie".to_string(), 5.5), ("a_tie".to_string(), 5.5)])
                .collect(),
        )
    }

    #[test]
    fn groups_take_top_prefix() {
        let r = ranking();
        let g = feature_groups(&r, 2, 3).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], "f0");
        assert_eq!(feature_groups(&r, 5, 10).unwrap().len(), 12);
        assert!(feature_groups(&r, 2, 0).is_err());
    }

    #[test]
    fn ties_rank_by_name() {
        let r = ranking();
        let pos = |n: &str| r.features.iter().position(|f| f.name == n).unwrap();
        assert!(pos("a_tie") < pos("b_tie"));
        let ranks: Vec<usize> = r.features.iter().map(|f| f.rank).collect();
        assert_eq!(ranks, (1..=12).collect::<Vec<_>>());
    }
}

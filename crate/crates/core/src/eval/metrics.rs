//! Ranking and regression metrics. Positives are labels above 0.5.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("NaN score"));
    }
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    // U statistic in half units so the sum stays an exact integer
    let mut below = 0u64;
    let mut u2 = 0u64;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i] > 0.5).count() as u64;
        let n = g.len() as u64 - p;
        u2 += p * (2 * below + n);
        below += n;
    }
    Ok(u2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Largest gap between true- and false-positive rates over all thresholds
/// `score >= t`.
pub fn ks_stat(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    for g in tie_groups(scores).iter().rev() {
        for &i in g {
            if labels[i] > 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        best = best.max((tp as f64 / pos as f64 - fp as f64 / neg as f64).abs());
    }
    Ok(best)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::dimension(format!(
            "rmse over {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

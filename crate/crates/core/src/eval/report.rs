//! Per-month out-of-time evaluation and its CSV/SVG rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::{Dataset, LabelKind, Month};
use crate::error::{Error, Result};
use crate::eval::metrics::{ks_stat, rmse, roc_auc};
use crate::model::Model;

/// Metrics of one slice of rows. Classification fills `auc`/`ks`,
/// regression fills `rmse`; an undefined metric stays empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub split: String,
    pub rows: usize,
    pub auc: Option<f64>,
    pub ks: Option<f64>,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: LabelKind,
    pub train: ReportRow,
    /// Chronological.
    pub months: Vec<ReportRow>,
    /// `train - monthly_mean` per metric.
    pub gap: ReportRow,
    /// Unweighted mean over months.
    pub monthly_mean: ReportRow,
    /// All monthly rows scored together.
    pub pooled: ReportRow,
    pub warnings: Vec<String>,
}

fn metrics_of(name: &str, task: LabelKind, scores: &[f64], labels: &[f64], warnings: &mut Vec<String>) -> Result<ReportRow> {
    let mut row = ReportRow {
        split: name.to_string(),
        rows: scores.len(),
        auc: None,
        ks: None,
        rmse: None,
    };
    match task {
        LabelKind::Binary => match (roc_auc(scores, labels), ks_stat(scores, labels)) {
            (Ok(a), Ok(k)) => {
                row.auc = Some(a);
                row.ks = Some(k);
            }
            (Err(Error::UndefinedMetric(m)), _) | (_, Err(Error::UndefinedMetric(m))) => {
                let msg = format!("{name}: {m}");
                log::warn!("{msg}");
                warnings.push(msg);
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        },
        LabelKind::Regression => row.rmse = Some(rmse(scores, labels)?),
        LabelKind::MultiClass => return Err(Error::protocol("out-of-time report supports binary and regression labels")),
    }
    Ok(row)
}

/// Scores a slice with the natural path and computes its metrics.
pub fn score_split(model: &Model, name: &str, ds: &Dataset, warnings: &mut Vec<String>) -> Result<ReportRow> {
    let scores = model.scores(ds)?;
    metrics_of(name, model.config.task, &scores, ds.labels()?, warnings)
}

fn mean_of(rows: &[ReportRow], f: impl Fn(&ReportRow) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

pub fn monthly_oot_report(model: &Model, train: &Dataset, buckets: &[(Month, Dataset)]) -> Result<EvalReport> {
    let task = model.config.task;
    let mut warnings = Vec::new();
    let train_row = score_split(model, "train", train, &mut warnings)?;
    let mut months = Vec::new();
    let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
    let mut sorted: Vec<&(Month, Dataset)> = buckets.iter().collect();
    sorted.sort_by_key(|(m, _)| *m);
    for (month, ds) in sorted {
        if ds.is_empty() {
            let msg = format!("{month}: empty bucket skipped");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let scores = model.scores(ds)?;
        let labels = ds.labels()?;
        months.push(metrics_of(&month.to_string(), task, &scores, labels, &mut warnings)?);
        all_scores.extend(scores);
        all_labels.extend_from_slice(labels);
    }
    if months.is_empty() {
        return Err(Error::protocol("no non-empty out-of-time bucket to evaluate"));
    }
    let monthly_mean = ReportRow {
        split: "monthly_mean".into(),
        rows: months.iter().map(|r| r.rows).sum(),
        auc: mean_of(&months, |r| r.auc),
        ks: mean_of(&months, |r| r.ks),
        rmse: mean_of(&months, |r| r.rmse),
    };
    let pooled = metrics_of("pooled", task, &all_scores, &all_labels, &mut warnings)?;
    let gap = ReportRow {
        split: "gap".into(),
        rows: 0,
        auc: diff(train_row.auc, monthly_mean.auc),
        ks: diff(train_row.ks, monthly_mean.ks),
        rmse: diff(train_row.rmse, monthly_mean.rmse),
    };
    Ok(EvalReport {
        task,
        train: train_row,
        months,
        gap,
        monthly_mean,
        pooled,
        warnings,
    })
}

pub fn write_rows_csv(rows: &[&ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl EvalReport {
    /// Month rows, then the train row and the gap row.
    pub fn table(&self) -> Vec<&ReportRow> {
        self.months.iter().chain([&self.train, &self.gap]).collect()
    }

    /// Writes `report.csv`, `summary.csv` (monthly mean and pooled) and one
    /// SVG chart per metric into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_rows_csv(&self.table(), &dir.join("report.csv"))?;
        write_rows_csv(&[&self.monthly_mean, &self.pooled], &dir.join("summary.csv"))?;
        let series: Vec<(&str, fn(&ReportRow) -> Option<f64>)> = match self.task {
            LabelKind::Regression => vec![("rmse", |r| r.rmse)],
            _ => vec![("auc", |r| r.auc), ("ks", |r| r.ks)],
        };
        for (name, f) in series {
            let points: Vec<(String, Option<f64>)> = self.months.iter().map(|r| (r.split.clone(), f(r))).collect();
            let svg = line_chart(&format!("{} by month", name.to_uppercase()), &points, f(&self.train));
            let p = dir.join(format!("{name}.svg"));
            fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// A self-contained SVG line chart; `reference` draws a dashed horizontal
/// line (the train value).
pub fn line_chart(title: &str, points: &[(String, Option<f64>)], reference: Option<f64>) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let vals: Vec<f64> = points.iter().filter_map(|p| p.1).chain(reference).collect();
    let (mut lo, mut hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.05;
        hi += 0.05;
    }
    let n = points.len().max(2) as f64 - 1.0;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#,
            pad - 4.0,
            y(v) + 4.0
        );
    }
    if let Some(r) = reference {
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="gray" stroke-dasharray="4 4"/>"#,
            y(r),
            w - pad,
            y(r)
        );
    }
    let path: Vec<String> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.1.map(|v| format!("{:.1},{:.1}", x(i), y(v))))
        .collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, path.join(" "));
    for (i, (label, v)) in points.iter().enumerate() {
        if let Some(v) = v {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#, x(i), y(*v));
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"#,
            x(i),
            h - pad + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

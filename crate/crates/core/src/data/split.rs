use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Calendar month, ordered chronologically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    pub year: i32,
    pub month: u32,
}

impl Month {
    pub fn of(date: NaiveDate) -> Self {
        Month {
            year: date.year(),
            month: date.month(),
        }
    }
}

impl std::fmt::Display for Month {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

#[derive(Debug, Clone)]
pub struct TemporalSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Test rows bucketed by calendar month, in chronological order.
    pub monthly: Vec<(Month, Dataset)>,
    pub warnings: Vec<String>,
}

/// Splits rows by date: `train < b0 <= val < b1 <= test`.
pub fn temporal_split(ds: &Dataset, boundaries: &[NaiveDate]) -> Result<TemporalSplit> {
    let ts = ds.timestamps.as_ref().ok_or_else(|| Error::Ingestion {
        row: 0,
        column: ds.schema.timestamp.clone().unwrap_or_else(|| "<timestamp>".into()),
        message: "temporal split needs timestamps".into(),
    })?;
    if boundaries.len() != 2 {
        return Err(Error::protocol(format!(
            "temporal split takes exactly two boundaries (val start, test start), got {}",
            boundaries.len()
        )));
    }
    if boundaries[0] >= boundaries[1] {
        return Err(Error::protocol("split boundaries must be strictly increasing"));
    }

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut by_month: BTreeMap<Month, Vec<usize>> = BTreeMap::new();
    for (i, &t) in ts.iter().enumerate() {
        if t < boundaries[0] {
            train.push(i);
        } else if t < boundaries[1] {
            val.push(i);
        } else {
            test.push(i);
            by_month.entry(Month::of(t)).or_default().push(i);
        }
    }

    let mut warnings = Vec::new();
    for (name, idx) in [("train", &train), ("val", &val), ("test", &test)] {
        if idx.is_empty() {
            let msg = format!("temporal split: {name} split is empty");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    Ok(TemporalSplit {
        train: ds.select_rows(&train),
        val: ds.select_rows(&val),
        test: ds.select_rows(&test),
        monthly: by_month
            .into_iter()
            .map(|(m, idx)| (m, ds.select_rows(&idx)))
            .collect(),
        warnings,
    })
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, crate::data::DATE_FORMAT)
        .map_err(|e| Error::protocol(format!("bad date `{s}`: {e}")))
}

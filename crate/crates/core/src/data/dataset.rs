use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDate;

use crate::data::schema::{FeatureKind, FeatureSchema, LabelKind};
use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// One cell of a row. Categorical values hold their vocabulary index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(u32),
    Missing,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }
}

/// Rows of schema-typed cells with optional labels and timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub rows: Vec<Vec<Cell>>,
    pub labels: Option<Vec<f64>>,
    pub timestamps: Option<Vec<NaiveDate>>,
    pub row_ids: Vec<u64>,
}

impl Dataset {
    /// Builds a dataset and checks every row against the schema.
    pub fn new(
        schema: FeatureSchema,
        rows: Vec<Vec<Cell>>,
        labels: Option<Vec<f64>>,
        timestamps: Option<Vec<NaiveDate>>,
        row_ids: Vec<u64>,
    ) -> Result<Self> {
        schema.validate()?;
        let ds = Dataset {
            schema,
            rows,
            labels,
            timestamps,
            row_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.rows.len();
        if self.row_ids.len() != n
            || self.labels.as_ref().is_some_and(|l| l.len() != n)
            || self.timestamps.as_ref().is_some_and(|t| t.len() != n)
        {
            return Err(Error::protocol("dataset columns have inconsistent lengths"));
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != self.schema.d() {
                return Err(Error::protocol(format!(
                    "row {r} has {} cells, schema has {}",
                    row.len(),
                    self.schema.d()
                )));
            }
            for (cell, spec) in row.iter().zip(&self.schema.features) {
                let ok = match (cell, spec.kind) {
                    (Cell::Missing, _) => true,
                    (Cell::Num(v), FeatureKind::Numerical) => v.is_finite(),
                    (Cell::Cat(i), FeatureKind::Categorical) => (*i as usize) < spec.vocab_len(),
                    _ => false,
                };
                if !ok {
                    return Err(Error::Ingestion {
                        row: r,
                        column: spec.name.clone(),
                        message: format!("invalid cell {cell:?}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn d(&self) -> usize {
        self.schema.d()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn labels(&self) -> Result<&[f64]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::protocol("dataset has no labels"))
    }

    /// Subset of rows by position, preserving row ids.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            timestamps: self
                .timestamps
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i]).collect()),
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }

    /// Projection onto a subset of features, in the given order.
    pub fn select_features(&self, names: &[String]) -> Result<Dataset> {
        let schema = self.schema.select(names)?;
        let cols: Vec<usize> = names
            .iter()
            .map(|n| self.schema.feature_index(n).expect("checked by select"))
            .collect();
        Ok(Dataset {
            schema,
            rows: self
                .rows
                .iter()
                .map(|row| cols.iter().map(|&c| row[c]).collect())
                .collect(),
            labels: self.labels.clone(),
            timestamps: self.timestamps.clone(),
            row_ids: self.row_ids.clone(),
        })
    }

    /// Concatenates rows of two datasets with identical schemas.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.schema.features != other.schema.features {
            return Err(Error::protocol("cannot concatenate datasets with different features"));
        }
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        let timestamps = match (&self.timestamps, &other.timestamps) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Dataset {
            schema: self.schema.clone(),
            rows: self.rows.iter().chain(&other.rows).cloned().collect(),
            labels,
            timestamps,
            row_ids: self.row_ids.iter().chain(&other.row_ids).copied().collect(),
        })
    }

    /// Drops labels, keeping everything else.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }
}

/// Reads a CSV file whose header names schema columns in any order.
///
/// Empty cells are missing. The label and timestamp columns are optional in
/// the file; when absent the dataset carries no labels or timestamps.
pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<Dataset> {
    schema.validate()?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &FeatureSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();

    let feature_pos: HashMap<&str, usize> = schema
        .features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.as_str(), i))
        .collect();
    let label_name = schema.label.as_ref().map(|l| l.name.as_str());
    let ts_name = schema.timestamp.as_deref();

    // column index in the file -> role
    enum Role {
        Feature(usize),
        Label,
        Timestamp,
    }
    let mut roles = Vec::with_capacity(header.len());
    let mut seen = vec![false; schema.d()];
    let (mut has_label, mut has_ts) = (false, false);
    for name in header.iter() {
        if let Some(&i) = feature_pos.get(name) {
            if seen[i] {
                return Err(Error::Ingestion {
                    row: 0,
                    column: name.to_string(),
                    message: "duplicate column".into(),
                });
            }
            seen[i] = true;
            roles.push(Role::Feature(i));
        } else if Some(name) == label_name {
            has_label = true;
            roles.push(Role::Label);
        } else if Some(name) == ts_name {
            has_ts = true;
            roles.push(Role::Timestamp);
        } else {
            return Err(Error::Ingestion {
                row: 0,
                column: name.to_string(),
                message: "unknown column".into(),
            });
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Ingestion {
            row: 0,
            column: schema.features[i].name.clone(),
            message: "column missing from header".into(),
        });
    }

    let label_kind = schema.label.as_ref().map(|l| (l.kind, l.classes));
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut timestamps = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row_no = r + 1;
        let mut row = vec![Cell::Missing; schema.d()];
        for (field, role) in record.iter().zip(&roles) {
            match role {
                Role::Feature(i) => {
                    let spec = &schema.features[*i];
                    row[*i] = parse_cell(field, spec, row_no)?;
                }
                Role::Label => {
                    let (kind, classes) = label_kind.expect("label role implies label spec");
                    labels.push(parse_label(field, kind, classes, row_no, label_name.unwrap())?);
                }
                Role::Timestamp => {
                    let date = NaiveDate::parse_from_str(field, DATE_FORMAT).map_err(|e| {
                        Error::Ingestion {
                            row: row_no,
                            column: ts_name.unwrap().to_string(),
                            message: format!("bad date `{field}`: {e}"),
                        }
                    })?;
                    timestamps.push(date);
                }
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    Dataset::new(
        schema.clone(),
        rows,
        has_label.then_some(labels),
        has_ts.then_some(timestamps),
        (0..n as u64).collect(),
    )
}

fn parse_cell(field: &str, spec: &crate::data::FeatureSpec, row: usize) -> Result<Cell> {
    if field.is_empty() {
        return Ok(Cell::Missing);
    }
    match spec.kind {
        FeatureKind::Numerical => match field.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Cell::Num(v)),
            _ => Err(Error::Ingestion {
                row,
                column: spec.name.clone(),
                message: format!("unparsable number `{field}`"),
            }),
        },
        FeatureKind::Categorical => {
            spec.category_index(field)
                .map(Cell::Cat)
                .ok_or_else(|| Error::Ingestion {
                    row,
                    column: spec.name.clone(),
                    message: format!("category `{field}` is not in the vocabulary"),
                })
        }
    }
}

fn parse_label(
    field: &str,
    kind: LabelKind,
    classes: Option<usize>,
    row: usize,
    column: &str,
) -> Result<f64> {
    let bad = |msg: String| Error::Ingestion {
        row,
        column: column.to_string(),
        message: msg,
    };
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| bad(format!("unparsable label `{field}`")))?;
    match kind {
        LabelKind::Binary if v == 0.0 || v == 1.0 => Ok(v),
        LabelKind::Binary => Err(bad(format!("binary label must be 0 or 1, got `{field}`"))),
        LabelKind::MultiClass => {
            let c = classes.unwrap_or(2);
            if v.fract() == 0.0 && v >= 0.0 && (v as usize) < c {
                Ok(v)
            } else {
                Err(bad(format!("class label must be in 0..{c}, got `{field}`")))
            }
        }
        LabelKind::Regression if v.is_finite() => Ok(v),
        LabelKind::Regression => Err(bad(format!("non-finite target `{field}`"))),
    }
}

/// Writes the dataset as CSV: features in schema order, then label and
/// timestamp columns when present.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(ds, file)
}

pub fn write_csv_to<W: std::io::Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ds.schema.features.iter().map(|f| f.name.clone()).collect();
    let label_name = match (&ds.labels, &ds.schema.label) {
        (Some(_), Some(l)) => Some(l.name.clone()),
        (Some(_), None) => return Err(Error::protocol("labels present but schema has no label")),
        _ => None,
    };
    let ts_name = match (&ds.timestamps, &ds.schema.timestamp) {
        (Some(_), Some(t)) => Some(t.clone()),
        (Some(_), None) => {
            return Err(Error::protocol("timestamps present but schema has no timestamp"))
        }
        _ => None,
    };
    header.extend(label_name.iter().cloned());
    header.extend(ts_name.iter().cloned());
    w.write_record(&header)?;

    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for (r, row) in ds.rows.iter().enumerate() {
        record.clear();
        for (cell, spec) in row.iter().zip(&ds.schema.features) {
            record.push(match cell {
                Cell::Missing => String::new(),
                Cell::Num(v) => format!("{v}"),
                Cell::Cat(i) => spec.vocab.as_ref().expect("categorical vocab")[*i as usize].clone(),
            });
        }
        if let Some(labels) = &ds.labels {
            record.push(format!("{}", labels[r]));
        }
        if let Some(ts) = &ds.timestamps {
            record.push(ts[r].format(DATE_FORMAT).to_string());
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

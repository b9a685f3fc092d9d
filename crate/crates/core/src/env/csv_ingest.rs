//! CSV ingestion for tabular tasks.
//!
//! Every column except the label (and optional group) column is a numeric
//! feature. Labels are integers `label_base..label_base + num_classes`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// A column by zero-based position or by header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    pub has_header: bool,
    /// Defaults to the last column.
    pub label_column: Option<ColumnRef>,
    /// Per-row user or source id, used for feature-skew partitioning.
    pub group_column: Option<ColumnRef>,
    /// Value of the first label (HAR-style files count from 1).
    pub label_base: usize,
    /// Inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            has_header: true,
            label_column: None,
            group_column: None,
            label_base: 0,
            num_classes: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CsvData {
    pub dataset: Dataset,
    pub feature_names: Vec<String>,
}

fn resolve(col: &ColumnRef, header: Option<&csv::StringRecord>, width: usize) -> Result<usize> {
    match col {
        ColumnRef::Index(i) if *i < width => Ok(*i),
        ColumnRef::Index(i) => Err(Error::Index {
            what: "csv column",
            index: *i,
            bound: width,
        }),
        ColumnRef::Name(name) => header
            .and_then(|h| h.iter().position(|c| c.trim() == name))
            .ok_or_else(|| Error::Format(format!("csv has no column named `{name}`"))),
    }
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<CsvData> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(input: R, schema: &CsvSchema) -> Result<CsvData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = if schema.has_header {
        Some(reader.headers().map_err(|e| Error::Parse { row: 1, msg: e.to_string() })?.clone())
    } else {
        None
    };
    let mut label_col = None;
    let mut group_col = None;
    let mut width = 0;
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    let mut groups = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        if label_col.is_none() {
            width = rec.len();
            let l = match &schema.label_column {
                Some(c) => resolve(c, header.as_ref(), width)?,
                None => width.checked_sub(1).ok_or_else(|| Error::Format("csv has no columns".into()))?,
            };
            let g = schema.group_column.as_ref().map(|c| resolve(c, header.as_ref(), width)).transpose()?;
            if g == Some(l) {
                return Err(Error::Format("label and group columns coincide".into()));
            }
            label_col = Some(l);
            group_col = g;
        }
        if rec.len() != width {
            return Err(Error::Parse {
                row,
                msg: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        let l = label_col.expect("set above");
        for (c, cell) in rec.iter().enumerate() {
            if c == l {
                let v: usize = cell.parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("label `{cell}` is not a non-negative integer"),
                })?;
                let y = v.checked_sub(schema.label_base).ok_or_else(|| Error::Parse {
                    row,
                    msg: format!("label {v} is below the label base {}", schema.label_base),
                })?;
                raw_labels.push((row, y));
            } else if Some(c) == group_col {
                groups.push(cell.parse::<usize>().map_err(|_| Error::Parse {
                    row,
                    msg: format!("group `{cell}` is not a non-negative integer"),
                })?);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("column {c}: `{cell}` is not numeric"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        msg: format!("column {c}: value is not finite"),
                    });
                }
                data.push(v);
            }
        }
    }
    let Some(l) = label_col else {
        return Err(Error::EmptyDataset("csv has no data rows".into()));
    };
    let num_classes = match schema.num_classes {
        Some(n) => n,
        None => raw_labels.iter().map(|p| p.1).max().map_or(0, |m| m + 1),
    };
    if let Some(&(row, y)) = raw_labels.iter().find(|p| p.1 >= num_classes) {
        return Err(Error::Parse {
            row,
            msg: format!("label {} out of range for {num_classes} classes", y + schema.label_base),
        });
    }
    let labels: Vec<usize> = raw_labels.into_iter().map(|p| p.1).collect();
    if group_col.is_none() {
        groups = labels.clone();
    }
    let features = width - 1 - usize::from(group_col.is_some());
    let feature_names = (0..width)
        .filter(|&c| c != l && Some(c) != group_col)
        .map(|c| header.as_ref().and_then(|h| h.get(c)).map_or_else(|| format!("f{c}"), str::to_string))
        .collect();
    let x = Tensor::new(vec![labels.len(), features], data)?;
    Ok(CsvData {
        dataset: Dataset::new(x, labels, groups, num_classes)?,
        feature_names,
    })
}

/// Per-column z-score fitted on one split and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Also returns the columns with zero variance; those map to 0.
    pub fn fit(x: &Tensor) -> (Self, Vec<usize>) {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n.max(1) as f64).sqrt()).collect();
        let zero = (0..d).filter(|&c| std[c] <= 1e-12).collect();
        (Self { mean, std }, zero)
    }

    pub fn apply(&self, x: &mut Tensor) -> Result<()> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape("standardize", &[self.mean.len()], &[x.cols()]));
        }
        for r in 0..x.rows() {
            for ((v, m), s) in x.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if *s <= 1e-12 { 0.0 } else { (*v - m) / s };
            }
        }
        Ok(())
    }
}

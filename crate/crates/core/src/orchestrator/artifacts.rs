//! File names and formats of run artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::cloud::Matrix;
use crate::error::{Error, Result};

pub const CHECKPOINT: &str = "model.ckpt";
pub const CONFIG: &str = "config.json";
pub const SUMMARY: &str = "summary.json";
pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
pub const FINETUNE_LOG: &str = "finetune_log.jsonl";
pub const METRICS: &str = "metrics.jsonl";
pub const EVENTS: &str = "events.jsonl";
pub const TIMING: &str = "timing.jsonl";

/// `h_layer0.csv`, `m_layer1.csv`, ...
pub fn matrix_file(kind: &str, layer: usize) -> String {
    format!("{kind}_layer{layer}.csv")
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                row: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Matrix as CSV with a `subtask,m0,m1,...` header and one row per sub-task.
pub fn write_matrix<T: ToString>(path: &Path, rows: &[Vec<T>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let cols = rows.first().map_or(0, Vec::len);
    let mut header = vec!["subtask".to_string()];
    header.extend((0..cols).map(|c| format!("m{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for (t, row) in rows.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(ToString::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn bool_rows(mask: &[Vec<bool>]) -> Vec<Vec<u8>> {
    mask.iter().map(|r| r.iter().map(|&b| u8::from(b)).collect()).collect()
}

/// Reads a matrix written by [`write_matrix`].
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("subtask") {
        return Err(Error::Format(format!("{} is not a matrix artifact", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row: i + 2,
                    msg: format!("`{v}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

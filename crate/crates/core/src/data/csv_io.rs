//! CSV dataset loading and writing.
//!
//! Files carry a header row. On load, one named column supplies the integer
//! label and every other column is parsed as an f64 feature, keeping header
//! order. Data rows are numbered from 1 in error messages; the header is
//! row 0. The writer emits `f0..f{d-1},label` and uses Rust's shortest
//! round-trip float formatting, so written files reload bit-identically.

use std::io::Write;
use std::path::Path;

use crate::numerics::Mat;
use crate::{Error, Result};

use super::Dataset;

fn csv_err(path: &Path, row: usize, msg: impl Into<String>) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        row,
        msg: msg.into(),
    }
}

/// Load a headered CSV, taking `label_column` as the label and all other
/// columns as features.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, 0, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, 0, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            csv_err(
                path,
                0,
                format!(
                    "unknown label column {label_column:?}; header has {}",
                    headers.join(", ")
                ),
            )
        })?;
    let width = headers.len();
    let dim = width - 1;

    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1;
        let record = record.map_err(|e| csv_err(path, row_no, e.to_string()))?;
        if record.len() != width {
            return Err(csv_err(
                path,
                row_no,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        for (j, field) in record.iter().enumerate() {
            if j == label_idx {
                let label: usize = field.trim().parse().map_err(|_| {
                    csv_err(
                        path,
                        row_no,
                        format!("label {field:?} is not a non-negative integer"),
                    )
                })?;
                labels.push(label);
            } else {
                let value: f64 = field.trim().parse().map_err(|_| {
                    csv_err(
                        path,
                        row_no,
                        format!("field {field:?} in column {:?} is not numeric", headers[j]),
                    )
                })?;
                rows.push(value);
            }
        }
    }

    let features = Mat::from_vec(labels.len(), dim, rows)?;
    Dataset::new(features, labels, "csv")
}

/// Write a dataset as headered CSV with columns `f0..f{d-1},label`.
pub fn write_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = dataset.dim();
    for j in 0..dim {
        write!(out, "f{j},")?;
    }
    writeln!(out, "label")?;
    for i in 0..dataset.len() {
        for j in 0..dim {
            write!(out, "{},", dataset.features.at(i, j))?;
        }
        writeln!(out, "{}", dataset.labels[i])?;
    }
    out.flush()?;
    Ok(())
}

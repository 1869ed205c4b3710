//! CSV ingestion and export.
//!
//! Schema: `sample_id,label,f0..f{D-1}` for labeled data or
//! `sample_id,f0..f{D-1}` for unlabeled data. UTF-8, `.` decimal,
//! newline-terminated rows. Export writes floats in shortest
//! round-trip form, so export -> ingest reproduces arrays exactly.

use std::fmt::Write as _;
use std::path::Path;

use super::{LabeledSet, UnlabeledSet};
use crate::diffcore::Tensor;
use crate::{Error, Result};

/// Expected column layout of an ingested file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvSchema {
    Labeled { feature_dim: usize },
    Unlabeled { feature_dim: usize },
}

impl CsvSchema {
    fn header(&self) -> String {
        let (labeled, d) = match *self {
            CsvSchema::Labeled { feature_dim } => (true, feature_dim),
            CsvSchema::Unlabeled { feature_dim } => (false, feature_dim),
        };
        let mut columns = vec!["sample_id".to_string()];
        if labeled {
            columns.push("label".to_string());
        }
        columns.extend((0..d).map(|i| format!("f{i}")));
        columns.join(",")
    }
}

/// A parsed file under either schema.
#[derive(Clone, Debug)]
pub enum IngestedSet {
    Labeled(LabeledSet),
    Unlabeled(UnlabeledSet),
}

/// Parse a CSV file, preserving row order. Malformed cells are rejected
/// with 1-based row and column coordinates (the header is row 1).
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<IngestedSet> {
    let text = std::fs::read_to_string(path)?;
    let fail = |row: usize, column: usize, message: String| Error::Csv {
        path: path.display().to_string(),
        row,
        column,
        message,
    };

    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| fail(1, 1, "missing header row".into()))?;
    let expected = schema.header();
    if header.trim_end() != expected {
        return Err(fail(
            1,
            1,
            format!("header `{header}` does not match schema `{expected}`"),
        ));
    }

    let (labeled, d) = match *schema {
        CsvSchema::Labeled { feature_dim } => (true, feature_dim),
        CsvSchema::Unlabeled { feature_dim } => (false, feature_dim),
    };
    let n_cols = 1 + usize::from(labeled) + d;

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut features = Vec::new();
    for (line_idx, line) in lines {
        let row = line_idx + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_cols {
            return Err(fail(
                row,
                cells.len(),
                format!("expected {n_cols} columns, found {}", cells.len()),
            ));
        }
        let mut col = 0;
        let parse_u64 = |cell: &str, col: usize| {
            cell.trim()
                .parse::<u64>()
                .map_err(|e| fail(row, col + 1, format!("bad integer `{cell}`: {e}")))
        };
        ids.push(parse_u64(cells[col], col)?);
        col += 1;
        if labeled {
            labels.push(parse_u64(cells[col], col)? as usize);
            col += 1;
        }
        for cell in &cells[col..] {
            let value = cell
                .trim()
                .parse::<f64>()
                .map_err(|e| fail(row, col + 1, format!("bad number `{cell}`: {e}")))?;
            features.push(value);
            col += 1;
        }
    }
    let n = ids.len();
    let features = Tensor::new(vec![n.max(1), d], if n == 0 { vec![0.0; d] } else { features })
        .map_err(|e| fail(1, 1, e.to_string()))?;
    if n == 0 {
        return Err(fail(2, 1, "file contains no data rows".into()));
    }
    Ok(if labeled {
        IngestedSet::Labeled(LabeledSet {
            ids,
            features,
            labels,
        })
    } else {
        IngestedSet::Unlabeled(UnlabeledSet { ids, features })
    })
}

pub fn export_labeled_csv(path: &Path, set: &LabeledSet) -> Result<()> {
    let d = set.feature_dim();
    let mut out = String::new();
    let _ = writeln!(out, "{}", CsvSchema::Labeled { feature_dim: d }.header());
    for (row, (&id, &label)) in set.ids.iter().zip(&set.labels).enumerate() {
        let _ = write!(out, "{id},{label}");
        for v in set.features.row(row) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn export_unlabeled_csv(path: &Path, set: &UnlabeledSet) -> Result<()> {
    let d = set.feature_dim();
    let mut out = String::new();
    let _ = writeln!(out, "{}", CsvSchema::Unlabeled { feature_dim: d }.header());
    for (row, &id) in set.ids.iter().enumerate() {
        let _ = write!(out, "{id}");
        for v in set.features.row(row) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

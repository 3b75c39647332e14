//! Label traces: CSV parsing and sentinel masking.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Marker for unannotated label rows.
pub const SENTINEL: f64 = -5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStatus {
    /// Every row was valid.
    Complete,
    /// Some rows were dropped.
    Partial,
    /// Every row was dropped; the trial carries no usable labels.
    Empty,
}

/// Label rows that survived masking, with their original positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSequence<T> {
    pub rows: Vec<Vec<T>>,
    pub mask: Vec<usize>,
    pub original_len: usize,
    pub status: MaskStatus,
}

impl<T: Scalar> LabelSequence<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn columns(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn column(&self, c: usize) -> Result<Vec<T>> {
        self.rows
            .iter()
            .map(|r| {
                r.get(c)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("label column {c} missing")))
            })
            .collect()
    }
}

/// Drops every row containing the sentinel, keeping order.
pub fn mask_invalid_rows<T: Scalar>(raw: &[Vec<T>]) -> LabelSequence<T> {
    let sentinel = T::lit(SENTINEL);
    let mut rows = Vec::new();
    let mut mask = Vec::new();
    for (i, row) in raw.iter().enumerate() {
        if !row.contains(&sentinel) {
            rows.push(row.clone());
            mask.push(i);
        }
    }
    let status = if rows.is_empty() && !raw.is_empty() {
        MaskStatus::Empty
    } else if rows.len() == raw.len() {
        MaskStatus::Complete
    } else {
        MaskStatus::Partial
    };
    if status == MaskStatus::Empty {
        log::warn!("all {} label rows carry the sentinel", raw.len());
    }
    LabelSequence { rows, mask, original_len: raw.len(), status }
}

/// Reads comma-separated label rows. A leading non-numeric line is treated
/// as a header. Values must be the sentinel or lie in `[−1, 1]`.
pub fn read_label_csv<T: Scalar>(path: &Path) -> Result<Vec<Vec<T>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|source| Error::Csv { path: path.into(), source })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(e) => return Err(Error::format(path, format!("line {}: {e}", line + 1))),
        };
        for &v in &values {
            if v != SENTINEL && !(-1.0..=1.0).contains(&v) {
                return Err(Error::format(path, format!("line {}: label {v} outside [-1, 1]", line + 1)));
            }
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::format(path, format!("line {}: expected {w} columns", line + 1)));
            }
            _ => {}
        }
        rows.push(values.into_iter().map(T::lit).collect());
    }
    Ok(rows)
}

pub fn write_label_csv<T: Scalar>(path: &Path, rows: &[Vec<T>]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_sentinel_is_identity() {
        let raw = vec![vec![0.1], vec![0.2]];
        let seq = mask_invalid_rows(&raw);
        assert_eq!(seq.rows, raw);
        assert_eq!(seq.mask, vec![0, 1]);
        assert_eq!(seq.status, MaskStatus::Complete);
    }

    #[test]
    fn all_sentinel_flags_empty() {
        let seq = mask_invalid_rows(&[vec![-5.0], vec![-5.0]]);
        assert!(seq.is_empty());
        assert_eq!(seq.status, MaskStatus::Empty);
    }

    #[test]
    fn drops_marked_rows() {
        let seq = mask_invalid_rows(&[vec![0.1], vec![-5.0], vec![0.3]]);
        assert_eq!(seq.rows, vec![vec![0.1], vec![0.3]]);
        assert_eq!(seq.mask, vec![0, 2]);
        // any column carrying the sentinel invalidates the row
        let seq = mask_invalid_rows(&[vec![0.1, -5.0], vec![0.2, 0.4]]);
        assert_eq!(seq.mask, vec![1]);
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        fs::write(&path, "valence,arousal\n0.1,0.2\n-5,-5\n-0.75,1\n").unwrap();
        let rows: Vec<Vec<f64>> = read_label_csv(&path).unwrap();
        assert_eq!(rows, vec![vec![0.1, 0.2], vec![-5.0, -5.0], vec![-0.75, 1.0]]);
        write_label_csv(&path, &rows).unwrap();
        assert_eq!(read_label_csv::<f64>(&path).unwrap(), rows);

        fs::write(&path, "0.1\n1.5\n").unwrap();
        assert!(read_label_csv::<f64>(&path).is_err());
    }
}

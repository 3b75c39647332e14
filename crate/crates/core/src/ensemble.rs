//! Merging per-fold prediction traces: CCC-centering and clipping.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ccc;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipOrder {
    /// Clip every trace, centre, clip again.
    EarlyClip,
    /// Centre, then clip.
    LateClip,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergePolicy {
    pub order: ClipOrder,
    pub weight_floor: f64,
}

impl MergePolicy {
    pub fn new(order: ClipOrder) -> Self {
        Self { order, weight_floor: 1e-3 }
    }
}

/// Per-frame predictions for one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTrace<T> {
    pub trial_id: String,
    pub values: Vec<T>,
}

/// Truncates every value to `[−1, 1]`.
pub fn clip<T: Scalar>(values: &[T]) -> Vec<T> {
    values.iter().map(|&v| v.max(-T::one()).min(T::one())).collect()
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::lit(v.len() as f64)
}

/// Agreement weight of each trace: CCC against the mean of the others,
/// floored at `floor`.
pub fn agreement_weights<T: Scalar>(traces: &[Vec<T>], floor: f64) -> Result<Vec<f64>> {
    let k = traces.len();
    let n = traces[0].len();
    if k == 1 || n < 2 {
        return Ok(vec![1.0; k]);
    }
    let total: Vec<T> = (0..n).map(|i| traces.iter().map(|t| t[i]).sum()).collect();
    let others = T::lit((k - 1) as f64);
    traces
        .iter()
        .map(|t| {
            let rest: Vec<T> = total.iter().zip(t).map(|(&s, &v)| (s - v) / others).collect();
            Ok(ccc(t, &rest)?.as_f64().max(floor))
        })
        .collect()
}

/// Weighted merge after shifting every trace to a common weighted mean.
pub fn ccc_center<T: Scalar>(traces: &[Vec<T>], floor: f64) -> Result<Vec<T>> {
    let first = traces.first().ok_or_else(|| Error::InvalidArgument("no traces to merge".into()))?;
    let n = first.len();
    if traces.iter().any(|t| t.len() != n) {
        return Err(Error::shape("ccc_center", "traces differ in length"));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty traces".into()));
    }
    if traces.len() == 1 {
        return Ok(first.clone());
    }
    let weights: Vec<T> = agreement_weights(traces, floor)?.into_iter().map(T::lit).collect();
    let weight_sum: T = weights.iter().copied().sum();
    let means: Vec<T> = traces.iter().map(|t| mean(t)).collect();
    let grand = weights.iter().zip(&means).map(|(&w, &m)| w * m).sum::<T>() / weight_sum;
    Ok((0..n)
        .map(|i| {
            traces
                .iter()
                .zip(&weights)
                .zip(&means)
                .map(|((t, &w), &m)| w * (t[i] - m + grand))
                .sum::<T>()
                / weight_sum
        })
        .collect())
}

pub fn merge<T: Scalar>(traces: &[Vec<T>], policy: &MergePolicy) -> Result<Vec<T>> {
    match policy.order {
        ClipOrder::EarlyClip => {
            let clipped: Vec<Vec<T>> = traces.iter().map(|t| clip(t)).collect();
            Ok(clip(&ccc_center(&clipped, policy.weight_floor)?))
        }
        ClipOrder::LateClip => Ok(clip(&ccc_center(traces, policy.weight_floor)?)),
    }
}

pub fn trace_csv<T: Scalar>(values: &[T]) -> String {
    let mut out = String::from("frame_index,value\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", v.as_f64()));
    }
    out
}

pub fn write_trace<T: Scalar>(path: &Path, values: &[T]) -> Result<()> {
    fs::write(path, trace_csv(values)).map_err(|e| Error::io(path, e))
}

/// Reads a `frame_index,value` CSV; indices must run 0, 1, 2, ...
pub fn read_trace<T: Scalar>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|source| {
        Error::Csv { path: path.into(), source }
    })?;
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|source| Error::Csv { path: path.into(), source })?;
        let parse_err = |e: String| Error::format(path, format!("row {}: {e}", row + 1));
        let index: usize = record.get(0).unwrap_or("").parse().map_err(|e| parse_err(format!("{e}")))?;
        let value: f64 = record.get(1).unwrap_or("").parse().map_err(|e| parse_err(format!("{e}")))?;
        if index != row {
            return Err(parse_err(format!("frame index {index} out of sequence")));
        }
        if !value.is_finite() {
            return Err(parse_err("non-finite value".into()));
        }
        values.push(T::lit(value));
    }
    Ok(values)
}

//! Nearest-timestamp pairing of label points with feature points, and the
//! padding/assembly helpers used to build per-label feature matrices.

use std::collections::BTreeMap;

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Feature index paired with each label index.
///
/// `index[i] = round_half_up(i · feature_rate / label_rate)`, clamped to
/// `[0, num_features − 1]`.
pub fn align_indices(
    label_rate_hz: f64,
    feature_rate_hz: f64,
    num_labels: usize,
    num_features: usize,
) -> Result<Vec<usize>> {
    if !(label_rate_hz > 0.0 && feature_rate_hz > 0.0) || !label_rate_hz.is_finite() || !feature_rate_hz.is_finite()
    {
        return Err(Error::InvalidArgument(format!(
            "rates must be positive, got label {label_rate_hz} Hz, feature {feature_rate_hz} Hz"
        )));
    }
    if num_features == 0 {
        return Err(Error::InvalidArgument("no feature points to align with".into()));
    }
    Ok((0..num_labels)
        .map(|i| {
            let pos = (i as f64 * feature_rate_hz) / label_rate_hz;
            ((pos + 0.5).floor() as usize).min(num_features - 1)
        })
        .collect())
}

/// Feature count needed so that every label index maps without clamping.
pub fn required_feature_len(label_rate_hz: f64, feature_rate_hz: f64, num_labels: usize) -> usize {
    if num_labels == 0 {
        return 0;
    }
    let pos = ((num_labels - 1) as f64 * feature_rate_hz) / label_rate_hz;
    (pos + 0.5).floor() as usize + 1
}

/// Extends `features` to `target_len` rows by repeating the last row.
pub fn pad_repeat_last<T: Scalar>(features: &FeatureSequence<T>, target_len: usize) -> Result<FeatureSequence<T>> {
    if features.frames == 0 {
        return Err(Error::InvalidArgument("cannot pad an empty feature sequence".into()));
    }
    if target_len < features.frames {
        return Err(Error::InvalidArgument(format!(
            "target length {target_len} shorter than {} frames",
            features.frames
        )));
    }
    let mut out = features.clone();
    let last = features.row(features.frames - 1).to_vec();
    for _ in features.frames..target_len {
        out.data.extend_from_slice(&last);
    }
    out.frames = target_len;
    Ok(out)
}

/// Dense `n × dim` matrix: provided rows where present, zeros elsewhere.
pub fn assemble_dense<T: Scalar>(
    present: &BTreeMap<usize, Vec<T>>,
    n: usize,
    dim: usize,
    rate_hz: f64,
) -> Result<FeatureSequence<T>> {
    let mut data = vec![T::zero(); n * dim];
    for (&i, row) in present {
        if i >= n {
            return Err(Error::InvalidArgument(format!("frame {i} out of range for {n} frames")));
        }
        if row.len() != dim {
            return Err(Error::shape("assemble_dense", format!("frame {i} has {} values, expected {dim}", row.len())));
        }
        data[i * dim..(i + 1) * dim].copy_from_slice(row);
    }
    FeatureSequence::new(n, dim, rate_hz, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_rates_identity() {
        assert_eq!(align_indices(25.0, 25.0, 5, 10).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn clamps_to_last_feature() {
        assert_eq!(align_indices(30.0, 100.0, 4, 8).unwrap(), vec![0, 3, 7, 7]);
        assert_eq!(required_feature_len(30.0, 100.0, 4), 11);
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(align_indices(0.0, 100.0, 4, 8).is_err());
        assert!(align_indices(30.0, -1.0, 4, 8).is_err());
    }

    #[test]
    fn pad_cases() {
        let seq = FeatureSequence::new(2, 2, 1.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pad_repeat_last(&seq, 2).unwrap(), seq);
        let padded = pad_repeat_last(&seq, 4).unwrap();
        assert_eq!(padded.data, vec![1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        let empty = FeatureSequence::<f64>::new(0, 2, 1.0, vec![]).unwrap();
        assert!(pad_repeat_last(&empty, 3).is_err());
    }

    #[test]
    fn assemble_cases() {
        let mut present = BTreeMap::new();
        present.insert(0, vec![1.0, 2.0]);
        present.insert(2, vec![5.0, 6.0]);
        let dense = assemble_dense(&present, 3, 2, 30.0).unwrap();
        assert_eq!(dense.data, vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        let none = assemble_dense::<f64>(&BTreeMap::new(), 2, 3, 30.0).unwrap();
        assert!(none.data.iter().all(|&v| v == 0.0));
        assert!(assemble_dense(&present, 2, 2, 30.0).is_err());
    }
}

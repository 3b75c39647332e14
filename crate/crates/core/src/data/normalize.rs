//! Per-dimension z-score normalization with statistics from training data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::manifest::{read_json, write_json};
use crate::data::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationStats {
    pub modalities: BTreeMap<Modality, DimStats>,
}

impl NormalizationStats {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Population mean and standard deviation per dimension over all rows of
/// all `sequences`; std is floored at [`STD_FLOOR`].
pub fn compute_stats<T: Scalar>(sequences: &[&FeatureSequence<T>]) -> Result<DimStats> {
    let dim = sequences
        .first()
        .map(|s| s.dim)
        .ok_or_else(|| Error::InvalidArgument("no training sequences for normalization".into()))?;
    if sequences.iter().any(|s| s.dim != dim) {
        return Err(Error::shape("compute_stats", "sequences differ in dimension"));
    }
    let rows: usize = sequences.iter().map(|s| s.frames).sum();
    if rows == 0 {
        return Err(Error::InvalidArgument("no training frames for normalization".into()));
    }
    let n = rows as f64;
    let mut mean = vec![0.0; dim];
    for s in sequences {
        for r in 0..s.frames {
            for (m, v) in mean.iter_mut().zip(s.row(r)) {
                *m += v.as_f64();
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for s in sequences {
        for r in 0..s.frames {
            for ((acc, v), m) in var.iter_mut().zip(s.row(r)).zip(&mean) {
                *acc += (v.as_f64() - m).powi(2);
            }
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok(DimStats { mean, std })
}

pub fn normalize<T: Scalar>(features: &FeatureSequence<T>, stats: &DimStats) -> Result<FeatureSequence<T>> {
    if stats.mean.len() != features.dim || stats.std.len() != features.dim {
        return Err(Error::shape(
            "normalize",
            format!("stats for {} dims, features have {}", stats.mean.len(), features.dim),
        ));
    }
    let mut out = features.clone();
    for row in out.data.chunks_mut(features.dim) {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = T::lit((v.as_f64() - m) / s.max(STD_FLOOR));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_dimension_maps_to_zero() {
        let seq = FeatureSequence::new(3, 2, 1.0, vec![1.0, 7.0, 2.0, 7.0, 3.0, 7.0]).unwrap();
        let stats = compute_stats(&[&seq]).unwrap();
        assert_eq!(stats.std[1], STD_FLOOR);
        let out = normalize(&seq, &stats).unwrap();
        assert!(out.data.chunks(2).all(|r| r[1] == 0.0));
    }

    #[test]
    fn standardized_data_is_near_identity() {
        let seq = FeatureSequence::<f64>::new(2, 1, 1.0, vec![-1.0, 1.0]).unwrap();
        let stats = compute_stats(&[&seq]).unwrap();
        let out = normalize(&seq, &stats).unwrap();
        assert!(out.data.iter().zip(&seq.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

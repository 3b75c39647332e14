//! Raw manifest to prepared, model-ready trials.
//!
//! Per trial: mask sentinel label rows, bring every stream onto the label
//! grid by nearest-timestamp pairing (padding short streams with their last
//! row and zero-filling sparse ones), keep only the rows paired with valid
//! labels, then z-score every stream with statistics from the training
//! partition.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::afsq::{read_feature_file, write_feature_file};
use crate::data::align::{align_indices, assemble_dense, pad_repeat_last, required_feature_len};
use crate::data::labels::{mask_invalid_rows, read_label_csv, write_label_csv, LabelSequence};
use crate::data::manifest::{resolve, Manifest, Partition, PreparedManifest, PreparedTrial, TrialManifest};
use crate::data::normalize::{compute_stats, normalize, NormalizationStats};
use crate::data::{FeatureSequence, Modality};
use crate::error::{Error, Result};

pub const STATS_FILE: &str = "stats.json";
pub const PREPARED_FILE: &str = "prepared.json";

/// One trial after synchronization, before normalization.
#[derive(Clone, Debug)]
pub struct AlignedTrial {
    pub labels: LabelSequence<f64>,
    pub features: BTreeMap<Modality, FeatureSequence<f64>>,
}

fn read_frame_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| l.parse::<usize>().map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn rate_key(hz: f64) -> i64 {
    (hz * 1000.0).round() as i64
}

/// Synchronizes one trial's streams with its valid label rows.
pub fn align_trial(manifest_path: &Path, trial: &TrialManifest) -> Result<Option<AlignedTrial>> {
    let raw: Vec<Vec<f64>> = read_label_csv(&resolve(manifest_path, &trial.label_path))?;
    let labels = mask_invalid_rows(&raw);
    if labels.is_empty() {
        log::warn!("trial {} has no valid label rows; skipped", trial.trial_id);
        return Ok(None);
    }
    let mut features = BTreeMap::new();
    for (&modality, source) in &trial.features {
        let path = resolve(manifest_path, &source.path);
        let mut seq: FeatureSequence<f64> = read_feature_file(&path)?;
        if let Some(expected) = source.rate_hz {
            if rate_key(expected) != rate_key(seq.rate_hz) {
                return Err(Error::InvalidArgument(format!(
                    "rate mismatch for {} {}: manifest {expected} Hz, file {} Hz",
                    trial.trial_id,
                    modality.as_str(),
                    seq.rate_hz
                )));
            }
        }
        if seq.rate_hz <= 0.0 {
            return Err(Error::format(&path, "feature rate must be positive"));
        }
        let needed = required_feature_len(trial.label_rate_hz, seq.rate_hz, raw.len());
        if let Some(frames_path) = &source.frames_path {
            let frames_path = resolve(manifest_path, frames_path);
            let indices = read_frame_indices(&frames_path)?;
            if indices.len() != seq.frames {
                return Err(Error::format(
                    &frames_path,
                    format!("{} frame indices for {} feature rows", indices.len(), seq.frames),
                ));
            }
            let span = indices.iter().max().map_or(0, |m| m + 1).max(needed);
            let present = indices.iter().enumerate().map(|(row, &f)| (f, seq.row(row).to_vec())).collect();
            seq = assemble_dense(&present, span, seq.dim, seq.rate_hz)?;
        }
        if seq.frames == 0 {
            return Err(Error::format(&path, "feature file has no frames"));
        }
        if seq.frames < needed {
            seq = pad_repeat_last(&seq, needed)?;
        }
        let paired = align_indices(trial.label_rate_hz, seq.rate_hz, raw.len(), seq.frames)?;
        let picked: Vec<usize> = labels.mask.iter().map(|&i| paired[i]).collect();
        let mut aligned = seq.select_rows(&picked)?.with_modality(modality);
        aligned.rate_hz = trial.label_rate_hz;
        features.insert(modality, aligned);
    }
    Ok(Some(AlignedTrial { labels, features }))
}

fn check_trial_id(id: &str) -> Result<()> {
    let bad = id.is_empty() || id.contains(['/', '\\']) || id == "." || id == "..";
    if bad {
        return Err(Error::InvalidArgument(format!("trial id {id:?} is not usable as a file name")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PrepareReport {
    pub prepared: PreparedManifest,
    pub skipped: Vec<String>,
}

/// Runs the whole preparation and writes every artifact into `out_dir`.
pub fn prepare(manifest_path: &Path, out_dir: &Path) -> Result<PrepareReport> {
    let manifest = Manifest::load(manifest_path)?;
    for t in &manifest.trials {
        check_trial_id(&t.trial_id)?;
    }
    let aligned: Vec<Option<AlignedTrial>> = manifest
        .trials
        .par_iter()
        .map(|t| align_trial(manifest_path, t))
        .collect::<Result<_>>()?;

    let mut stats = NormalizationStats::default();
    for modality in Modality::ALL {
        let train: Vec<&FeatureSequence<f64>> = manifest
            .trials
            .iter()
            .zip(&aligned)
            .filter(|(t, _)| t.partition == Partition::Train)
            .filter_map(|(_, a)| a.as_ref().and_then(|a| a.features.get(&modality)))
            .collect();
        let used = aligned.iter().flatten().any(|a| a.features.contains_key(&modality));
        if !used {
            continue;
        }
        if train.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no training trials carry the {} stream; cannot compute normalization",
                modality.as_str()
            )));
        }
        stats.modalities.insert(modality, compute_stats(&train)?);
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trials = Vec::new();
    let mut skipped = Vec::new();
    for (trial, aligned) in manifest.trials.iter().zip(aligned) {
        let Some(aligned) = aligned else {
            skipped.push(trial.trial_id.clone());
            continue;
        };
        let mut features = BTreeMap::new();
        for (modality, seq) in &aligned.features {
            let normalized = normalize(seq, &stats.modalities[modality])?;
            let name = PathBuf::from(format!("{}.{}.afsq", trial.trial_id, modality.as_str()));
            write_feature_file(&out_dir.join(&name), &normalized)?;
            features.insert(*modality, name);
        }
        let labels = PathBuf::from(format!("{}.labels.csv", trial.trial_id));
        write_label_csv(&out_dir.join(&labels), &aligned.labels.rows)?;
        trials.push(PreparedTrial {
            trial_id: trial.trial_id.clone(),
            subject_id: trial.subject_id.clone(),
            partition: trial.partition,
            frames: aligned.labels.len(),
            label_columns: aligned.labels.columns(),
            labels,
            features,
        });
    }
    stats.save(&out_dir.join(STATS_FILE))?;
    let prepared = PreparedManifest { stats: PathBuf::from(STATS_FILE), trials };
    prepared.save(&out_dir.join(PREPARED_FILE))?;
    Ok(PrepareReport { prepared, skipped })
}

//! Seeded synthetic datasets with learnable, causal targets.
//!
//! Each stream is an AR(1) process per dimension. The targets are a
//! squashed sum of exponentially smoothed random projections of the three
//! streams as seen on the label grid, so a causal model can fit them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::afsq::write_feature_file;
use crate::data::align::{align_indices, required_feature_len};
use crate::data::dataset::{to_channels_first, TrialData};
use crate::data::labels::{write_label_csv, SENTINEL};
use crate::data::manifest::{Manifest, ModalitySource, Partition, TrialManifest};
use crate::data::{Dimension, FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::fusion::{ModelKind, SequenceInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub train_subjects: usize,
    pub validation_subjects: usize,
    pub test_subjects: usize,
    pub trials_per_subject: usize,
    /// Label frames per trial.
    pub frames: usize,
    pub label_rate_hz: f64,
    pub visual_dim: usize,
    pub mfcc_dim: usize,
    pub vggish_dim: usize,
    pub visual_rate_hz: f64,
    pub mfcc_rate_hz: f64,
    pub vggish_rate_hz: f64,
    /// Length of a run of sentinel label rows placed in every third trial.
    pub sentinel_run: usize,
    /// Smoothing factor of the target filter.
    pub smoothing: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_subjects: 8,
            validation_subjects: 2,
            test_subjects: 1,
            trials_per_subject: 1,
            frames: 400,
            label_rate_hz: 30.0,
            visual_dim: 512,
            mfcc_dim: 39,
            vggish_dim: 128,
            visual_rate_hz: 30.0,
            mfcc_rate_hz: 100.0,
            vggish_rate_hz: 30.0,
            sentinel_run: 0,
            smoothing: 0.1,
        }
    }
}

impl SyntheticSpec {
    fn rate(&self, m: Modality) -> f64 {
        match m {
            Modality::Visual => self.visual_rate_hz,
            Modality::Mfcc => self.mfcc_rate_hz,
            Modality::Vggish => self.vggish_rate_hz,
        }
    }

    fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.visual_dim,
            Modality::Mfcc => self.mfcc_dim,
            Modality::Vggish => self.vggish_dim,
        }
    }
}

/// One generated trial at native stream rates.
#[derive(Clone, Debug)]
pub struct SyntheticTrial {
    pub trial_id: String,
    pub subject_id: String,
    pub partition: Partition,
    pub label_rate_hz: f64,
    pub streams: BTreeMap<Modality, FeatureSequence<f64>>,
    /// `[valence, arousal]` per label frame; sentinel rows included.
    pub labels: Vec<Vec<f64>>,
}

fn ar1(frames: usize, dim: usize, rate_hz: f64, rng: &mut ChaCha8Rng) -> FeatureSequence<f64> {
    let mut data = Vec::with_capacity(frames * dim);
    let mut state = vec![0.0f64; dim];
    for _ in 0..frames {
        for s in state.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *s = 0.9 * *s + 0.45 * z;
        }
        data.extend_from_slice(&state);
    }
    FeatureSequence { frames, dim, rate_hz, modality: None, data }
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Generates every trial. Identical specs and seeds give identical data.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticTrial>> {
    if spec.frames == 0 || spec.trials_per_subject == 0 {
        return Err(Error::InvalidArgument("synthetic trials need frames and trials per subject".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // One projection per (dimension, modality), shared by all trials.
    let projections: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| Modality::ALL.iter().map(|&m| unit_vector(spec.dim(m), &mut rng)).collect())
        .collect();
    let mixing: Vec<[f64; 3]> =
        (0..2).map(|_| [rng.random_range(0.6..1.2), rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)]).collect();

    let partitions = [
        (Partition::Train, spec.train_subjects, "s"),
        (Partition::Validation, spec.validation_subjects, "v"),
        (Partition::Test, spec.test_subjects, "t"),
    ];
    let mut trials = Vec::new();
    for (partition, subjects, prefix) in partitions {
        for s in 0..subjects {
            for k in 0..spec.trials_per_subject {
                let subject_id = format!("{prefix}{s:03}");
                let trial_id = format!("{subject_id}_{k}");
                let mut streams = BTreeMap::new();
                for m in Modality::ALL {
                    let rate = spec.rate(m);
                    let frames = required_feature_len(spec.label_rate_hz, rate, spec.frames);
                    streams.insert(m, ar1(frames, spec.dim(m), rate, &mut rng).with_modality(m));
                }
                let labels = targets(spec, &streams, &projections, &mixing)?;
                trials.push(SyntheticTrial {
                    trial_id,
                    subject_id,
                    partition,
                    label_rate_hz: spec.label_rate_hz,
                    streams,
                    labels,
                });
            }
        }
    }
    for (i, trial) in trials.iter_mut().enumerate() {
        if spec.sentinel_run > 0 && i % 3 == 0 {
            let start = spec.frames / 3;
            let end = (start + spec.sentinel_run).min(spec.frames);
            for row in &mut trial.labels[start..end] {
                row[0] = SENTINEL;
            }
        }
    }
    Ok(trials)
}

fn targets(
    spec: &SyntheticSpec,
    streams: &BTreeMap<Modality, FeatureSequence<f64>>,
    projections: &[Vec<Vec<f64>>],
    mixing: &[[f64; 3]],
) -> Result<Vec<Vec<f64>>> {
    let mut aligned = Vec::new();
    for m in Modality::ALL {
        let seq = &streams[&m];
        aligned.push(align_indices(spec.label_rate_hz, seq.rate_hz, spec.frames, seq.frames)?);
    }
    let mut columns = Vec::new();
    for (proj, mix) in projections.iter().zip(mixing) {
        let mut smooth = [0.0f64; 3];
        let mut column = Vec::with_capacity(spec.frames);
        for t in 0..spec.frames {
            let mut drive = 0.0;
            for (b, (m, idx)) in Modality::ALL.iter().zip(&aligned).enumerate() {
                let row = streams[m].row(idx[t]);
                let p: f64 = row.iter().zip(&proj[b]).map(|(x, w)| x * w).sum();
                smooth[b] = (1.0 - spec.smoothing) * smooth[b] + spec.smoothing * p;
                drive += mix[b] * smooth[b];
            }
            column.push(0.8 * (1.5 * drive).tanh());
        }
        columns.push(column);
    }
    Ok((0..spec.frames).map(|t| vec![columns[0][t], columns[1][t]]).collect())
}

impl SyntheticTrial {
    /// Streams sampled on the label grid, as the model sees them.
    pub fn trial_data(&self, kind: ModelKind, dimension: Dimension) -> Result<TrialData<f64>> {
        let n = self.labels.len();
        let grid = |m: Modality| -> Result<_> {
            let seq = &self.streams[&m];
            let idx = align_indices(self.label_rate_hz, seq.rate_hz, n, seq.frames)?;
            to_channels_first(&seq.select_rows(&idx)?)
        };
        let (mfcc, vggish) = match kind {
            ModelKind::Unimodal => (None, None),
            ModelKind::Multimodal => (Some(grid(Modality::Mfcc)?), Some(grid(Modality::Vggish)?)),
        };
        Ok(TrialData {
            trial_id: self.trial_id.clone(),
            input: SequenceInput { visual: grid(Modality::Visual)?, mfcc, vggish },
            target: Some(self.labels.iter().map(|r| r[dimension.column()]).collect()),
        })
    }
}

/// Writes feature files, label CSVs and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, trials: &[SyntheticTrial]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest { trials: Vec::new() };
    for trial in trials {
        let mut features = BTreeMap::new();
        for (m, seq) in &trial.streams {
            let name = PathBuf::from(format!("{}.{}.afsq", trial.trial_id, m.as_str()));
            write_feature_file(&dir.join(&name), seq)?;
            features.insert(*m, ModalitySource { path: name, rate_hz: Some(seq.rate_hz), frames_path: None });
        }
        let label_path = PathBuf::from(format!("{}.csv", trial.trial_id));
        write_label_csv(&dir.join(&label_path), &trial.labels)?;
        manifest.trials.push(TrialManifest {
            trial_id: trial.trial_id.clone(),
            subject_id: trial.subject_id.clone(),
            partition: trial.partition,
            label_path,
            label_rate_hz: trial.label_rate_hz,
            features,
        });
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

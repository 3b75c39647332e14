//! Trial manifests: the raw input description and the prepared output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

/// One modality's raw feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySource {
    pub path: PathBuf,
    /// Expected rate; must agree with the file header when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_hz: Option<f64>,
    /// CSV of frame indices, one per feature row, for sparse streams
    /// (e.g. frames with no detected face). Missing frames become zeros.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_path: Option<PathBuf>,
}

/// A label file and its synchronized feature streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialManifest {
    pub trial_id: String,
    pub subject_id: String,
    pub partition: Partition,
    pub label_path: PathBuf,
    pub label_rate_hz: f64,
    pub features: BTreeMap<Modality, ModalitySource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub trials: Vec<TrialManifest>,
}

/// Identity of a trial for fold construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialInfo {
    pub trial_id: String,
    pub subject_id: String,
    pub partition: Partition,
}

/// A prepared trial: aligned, masked, normalized, all streams at the label rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreparedTrial {
    pub trial_id: String,
    pub subject_id: String,
    pub partition: Partition,
    pub frames: usize,
    pub label_columns: usize,
    pub labels: PathBuf,
    pub features: BTreeMap<Modality, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreparedManifest {
    pub stats: PathBuf,
    pub trials: Vec<PreparedTrial>,
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves `path` against the directory holding `manifest`.
pub fn resolve(manifest: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(path)
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.trials {
            if !seen.insert(&t.trial_id) {
                return Err(Error::InvalidArgument(format!("duplicate trial id {}", t.trial_id)));
            }
            if !t.features.contains_key(&Modality::Visual) {
                return Err(Error::InvalidArgument(format!("trial {} has no visual stream", t.trial_id)));
            }
        }
        Ok(())
    }

    pub fn infos(&self) -> Vec<TrialInfo> {
        self.trials
            .iter()
            .map(|t| TrialInfo { trial_id: t.trial_id.clone(), subject_id: t.subject_id.clone(), partition: t.partition })
            .collect()
    }
}

impl PreparedManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn infos(&self) -> Vec<TrialInfo> {
        self.trials
            .iter()
            .map(|t| TrialInfo { trial_id: t.trial_id.clone(), subject_id: t.subject_id.clone(), partition: t.partition })
            .collect()
    }

    pub fn trial(&self, id: &str) -> Option<&PreparedTrial> {
        self.trials.iter().find(|t| t.trial_id == id)
    }
}

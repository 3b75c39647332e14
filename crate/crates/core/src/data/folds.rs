//! Subject-independent cross-validation folds.
//!
//! Fold 0 is the given train/validation partition. The original training
//! subjects are split into `k − 1` groups balanced on trial count; fold
//! `i ≥ 1` validates on group `i` and trains on every other group plus the
//! original validation trials.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{read_json, write_json, Partition, TrialInfo};
use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldFile {
    pub seed: u64,
    pub folds: Vec<FoldSplit>,
}

impl FoldFile {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn fold(&self, id: usize) -> Result<&FoldSplit> {
        self.folds
            .iter()
            .find(|f| f.fold_id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("fold {id} not in fold file")))
    }
}

/// Builds `k` folds. Test-partition trials never enter any fold.
pub fn make_folds(trials: &[TrialInfo], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let groups_needed = k - 1;

    let mut trial_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in trials.iter().filter(|t| t.partition == Partition::Train) {
        *trial_counts.entry(&t.subject_id).or_default() += 1;
    }
    for t in trials.iter().filter(|t| t.partition == Partition::Validation) {
        if trial_counts.contains_key(t.subject_id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "subject {} appears in both training and validation partitions",
                t.subject_id
            )));
        }
    }
    if trial_counts.len() < groups_needed {
        return Err(Error::InvalidArgument(format!(
            "{} training subjects cannot fill {groups_needed} folds",
            trial_counts.len()
        )));
    }

    let mut subjects: Vec<(&str, usize)> = trial_counts.into_iter().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    subjects.sort_by_key(|s| std::cmp::Reverse(s.1));

    // (trial count, subject count) per group
    let mut load = vec![(0usize, 0usize); groups_needed];
    let mut group_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (subject, count) in subjects {
        let target = (0..groups_needed).min_by_key(|&g| (load[g], g)).expect("at least one group");
        load[target].0 += count;
        load[target].1 += 1;
        group_of.insert(subject, target + 1);
    }

    let ids = |pred: &dyn Fn(&TrialInfo) -> bool| -> Vec<String> {
        trials.iter().filter(|t| pred(t)).map(|t| t.trial_id.clone()).collect()
    };
    let mut folds = vec![FoldSplit {
        fold_id: 0,
        train: ids(&|t| t.partition == Partition::Train),
        validation: ids(&|t| t.partition == Partition::Validation),
    }];
    for fold in 1..k {
        let in_group = |t: &TrialInfo| t.partition == Partition::Train && group_of[t.subject_id.as_str()] == fold;
        folds.push(FoldSplit {
            fold_id: fold,
            train: ids(&|t| t.partition != Partition::Test && !in_group(t)),
            validation: ids(&in_group),
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(id: &str, subject: &str, partition: Partition) -> TrialInfo {
        TrialInfo { trial_id: id.into(), subject_id: subject.into(), partition }
    }

    #[test]
    fn too_few_subjects() {
        let trials = vec![info("a", "s1", Partition::Train), info("b", "s2", Partition::Validation)];
        assert!(make_folds(&trials, 6, 0).is_err());
    }

    #[test]
    fn two_subject_video_trials_stay_together() {
        let mut trials = Vec::new();
        for s in 0..10 {
            trials.push(info(&format!("v{s}"), &format!("s{s}"), Partition::Train));
            trials.push(info(&format!("v{s}_right"), &format!("s{s}"), Partition::Train));
        }
        trials.push(info("val", "sv", Partition::Validation));
        trials.push(info("test", "st", Partition::Test));
        let folds = make_folds(&trials, 6, 9).unwrap();
        for f in &folds[1..] {
            assert_eq!(f.validation.len(), 4);
            assert!(!f.train.contains(&"test".to_string()));
            assert!(f.train.contains(&"val".to_string()));
            for id in &f.validation {
                let partner = if let Some(base) = id.strip_suffix("_right") { base.to_string() } else { format!("{id}_right") };
                assert!(f.validation.contains(&partner));
            }
        }
    }
}

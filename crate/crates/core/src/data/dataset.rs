//! Prepared trials as model inputs and resampling windows.

use std::path::Path;

use crate::data::afsq::read_feature_file;
use crate::data::labels::read_label_csv;
use crate::data::manifest::{resolve, PreparedTrial};
use crate::data::windows::{window_starts, WindowSpec};
use crate::data::{Dimension, FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::fusion::{ModelKind, SequenceInput};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whole-trial model input with its (optional) target trace.
#[derive(Clone, Debug)]
pub struct TrialData<T> {
    pub trial_id: String,
    pub input: SequenceInput<T>,
    pub target: Option<Vec<T>>,
}

impl<T: Scalar> TrialData<T> {
    pub fn frames(&self) -> usize {
        self.input.frames()
    }
}

/// A fixed-length slice of one trial. Frames past `valid` are zero padding.
#[derive(Clone, Debug)]
pub struct Window<T> {
    pub trial: usize,
    pub start: usize,
    pub valid: usize,
    pub input: SequenceInput<T>,
    pub target: Vec<T>,
}

/// `frames × dim` rows to a `[dim × frames]` tensor.
pub fn to_channels_first<T: Scalar>(seq: &FeatureSequence<T>) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); seq.frames * seq.dim];
    for f in 0..seq.frames {
        for (d, &v) in seq.row(f).iter().enumerate() {
            data[d * seq.frames + f] = v;
        }
    }
    Tensor::new(vec![seq.dim, seq.frames], data)
}

/// Columns `[start, start + len)` of a `[D×T]` tensor, zero beyond `T`.
pub fn slice_columns<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (rows, t) = x.dims2()?;
    let mut data = vec![T::zero(); rows * len];
    let avail = t.saturating_sub(start).min(len);
    for r in 0..rows {
        data[r * len..r * len + avail].copy_from_slice(&x.row(r)[start..start + avail]);
    }
    Ok(Tensor::from_parts(vec![rows, len], data))
}

impl<T: Scalar> SequenceInput<T> {
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        let cut = |x: &Tensor<T>| slice_columns(x, start, len);
        Ok(Self {
            visual: cut(&self.visual)?,
            mfcc: self.mfcc.as_ref().map(cut).transpose()?,
            vggish: self.vggish.as_ref().map(cut).transpose()?,
        })
    }
}

/// Loads a prepared trial; aural streams are only read for multimodal models.
pub fn load_trial<T: Scalar>(
    prepared_path: &Path,
    trial: &PreparedTrial,
    kind: ModelKind,
    dimension: Option<Dimension>,
) -> Result<TrialData<T>> {
    let stream = |m: Modality| -> Result<Tensor<T>> {
        let rel = trial.features.get(&m).ok_or_else(|| {
            Error::InvalidArgument(format!("trial {} has no {} stream", trial.trial_id, m.as_str()))
        })?;
        let seq: FeatureSequence<T> = read_feature_file(&resolve(prepared_path, rel))?;
        if seq.frames != trial.frames {
            return Err(Error::shape(
                "load_trial",
                format!("{} {} has {} frames, labels have {}", trial.trial_id, m.as_str(), seq.frames, trial.frames),
            ));
        }
        to_channels_first(&seq)
    };
    let visual = stream(Modality::Visual)?;
    let (mfcc, vggish) = match kind {
        ModelKind::Unimodal => (None, None),
        ModelKind::Multimodal => (Some(stream(Modality::Mfcc)?), Some(stream(Modality::Vggish)?)),
    };
    let target = match dimension {
        None => None,
        Some(dim) => {
            let rows: Vec<Vec<T>> = read_label_csv(&resolve(prepared_path, &trial.labels))?;
            let column = rows
                .iter()
                .map(|r| {
                    r.get(dim.column()).copied().ok_or_else(|| {
                        Error::InvalidArgument(format!("trial {} has no {} labels", trial.trial_id, dim.as_str()))
                    })
                })
                .collect::<Result<Vec<T>>>()?;
            if column.len() != trial.frames {
                return Err(Error::shape("load_trial", format!("{} label rows vs {} frames", column.len(), trial.frames)));
            }
            Some(column)
        }
    };
    Ok(TrialData { trial_id: trial.trial_id.clone(), input: SequenceInput { visual, mfcc, vggish }, target })
}

/// Cuts every labelled trial into windows.
pub fn make_windows<T: Scalar>(trials: &[TrialData<T>], spec: &WindowSpec) -> Result<Vec<Window<T>>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (index, trial) in trials.iter().enumerate() {
        let target = trial
            .target
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("trial {} has no targets", trial.trial_id)))?;
        let frames = trial.frames();
        for start in window_starts(frames, spec) {
            let valid = (frames - start).min(spec.length);
            out.push(Window {
                trial: index,
                start,
                valid,
                input: trial.input.window(start, spec.length)?,
                target: target[start..start + valid].to_vec(),
            });
        }
    }
    Ok(out)
}

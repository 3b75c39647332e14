//! Trial ingestion and preparation: label/feature synchronization, sentinel
//! masking, padding, normalization, windowing and fold construction.

pub mod afsq;
pub mod align;
pub mod dataset;
pub mod folds;
pub mod labels;
pub mod manifest;
pub mod normalize;
pub mod prepare;
pub mod synthetic;
pub mod windows;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Input stream kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Mfcc,
    Vggish,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Mfcc, Modality::Vggish];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Mfcc => "mfcc",
            Modality::Vggish => "vggish",
        }
    }
}

/// Per-trial `frames × dim` feature matrix, row-major, at a nominal rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    pub frames: usize,
    pub dim: usize,
    pub rate_hz: f64,
    pub modality: Option<Modality>,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(frames: usize, dim: usize, rate_hz: f64, data: Vec<T>) -> Result<Self> {
        if frames * dim != data.len() {
            return Err(Error::shape(
                "feature_sequence",
                format!("{frames}x{dim} needs {} values, got {}", frames * dim, data.len()),
            ));
        }
        Ok(Self { frames, dim, rate_hz, modality: None, data })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = Some(modality);
        self
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.frames {
                return Err(Error::shape("select_rows", format!("row {i} of {}", self.frames)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self { frames: indices.len(), dim: self.dim, rate_hz: self.rate_hz, modality: self.modality, data })
    }
}

/// Label dimension modelled by one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Valence,
    Arousal,
}

impl Dimension {
    /// Column in the label files.
    pub fn column(self) -> usize {
        match self {
            Dimension::Valence => 0,
            Dimension::Arousal => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Valence => "valence",
            Dimension::Arousal => "arousal",
        }
    }
}

//! Audio-visual leader-follower attentive fusion for continuous emotion
//! regression over precomputed per-frame features.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which the training pipeline and file
//! formats use.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type FusionModel = fusion::FusionModel<f64>;
pub type SequenceInput = fusion::SequenceInput<f64>;
pub type FeatureSequence = data::FeatureSequence<f64>;
pub type LabelSequence = data::labels::LabelSequence<f64>;
pub type Window = data::dataset::Window<f64>;
pub type TrialData = data::dataset::TrialData<f64>;
pub type PredictionTrace = ensemble::PredictionTrace<f64>;

pub type TensorF32 = tensor::Tensor<f32>;
pub type TapeF32 = autodiff::Tape<f32>;
pub type FusionModelF32 = fusion::FusionModel<f32>;

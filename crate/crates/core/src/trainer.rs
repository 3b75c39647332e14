//! Optimization and the epoch-level training controller.
//!
//! Each epoch trains on shuffled windows, scores the validation windows and
//! hands the validation CCC to [`controller_update`]. The controller first
//! lowers the learning rate on a plateau, then releases frozen parameter
//! groups one at a time, and stops when nothing is left to release, when
//! validation CCC has stagnated for `early_stop` epochs, or at `max_epochs`.
//! After every epoch the best parameters seen so far are reloaded.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::dataset::Window;
use crate::data::windows::{window_starts, WindowSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, SequenceInput};
use crate::metrics::{ccc, ccc_loss};
use crate::nn::{Forward, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub early_stop: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Start with every freezable group frozen.
    pub freeze_backbone: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            lr: 1e-5,
            min_lr: 1e-6,
            plateau_patience: 5,
            lr_factor: 0.1,
            early_stop: 20,
            max_epochs: 100,
            weight_decay: 1e-4,
            seed: 0,
            freeze_backbone: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("need 0 <= min_lr <= lr");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop == 0 || self.max_epochs == 0 {
            return bad("patience, early_stop and max_epochs must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Adam with bias correction and coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Option<Moments<T>>>,
}

#[derive(Clone, Debug)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
    step: i32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_count: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, slots: vec![None; param_count] }
    }

    /// Updates every trainable parameter that has a gradient. Moment
    /// buffers are created on a parameter's first update.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        trainable: &[bool],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || trainable.len() != store.len() || self.slots.len() != store.len() {
            return Err(Error::shape("adam_step", "parameter, gradient and mask counts differ"));
        }
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (eps, lr, wd) = (T::lit(self.eps), T::lit(lr), T::lit(weight_decay));
        for (i, (grad, &on)) in grads.iter().zip(trainable).enumerate() {
            let (Some(grad), true) = (grad, on) else { continue };
            let param = store.get_mut(crate::nn::ParamId(i));
            if grad.shape() != param.shape() {
                return Err(Error::shape("adam_step", format!("{:?} vs {:?}", grad.shape(), param.shape())));
            }
            let slot = self.slots[i].get_or_insert_with(|| Moments {
                first: vec![T::zero(); param.len()],
                second: vec![T::zero(); param.len()],
                step: 0,
            });
            slot.step += 1;
            let c1 = T::one() - b1.powi(slot.step);
            let c2 = T::one() - b2.powi(slot.step);
            for (((p, &g), m), v) in
                param.data_mut().iter_mut().zip(grad.data()).zip(&mut slot.first).zip(&mut slot.second)
            {
                let g = g + wd * *p;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    None,
    ReduceLr,
    ReleaseGroup,
    Stop,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::None => "none",
            Action::ReduceLr => "reduce_lr",
            Action::ReleaseGroup => "release_group",
            Action::Stop => "stop",
        })
    }
}

/// Controller bookkeeping; `epoch` counts completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub epoch: usize,
    pub plateau_counter: usize,
    pub stagnation_counter: usize,
    pub current_lr: f64,
    pub released_group_count: usize,
    pub best_val_ccc: f64,
}

impl ControllerState {
    pub fn new(config: &TrainerConfig) -> Self {
        Self {
            epoch: 0,
            plateau_counter: 0,
            stagnation_counter: 0,
            current_lr: config.lr,
            released_group_count: 0,
            best_val_ccc: f64::NEG_INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerStep {
    pub state: ControllerState,
    pub action: Action,
    pub improved: bool,
}

fn at_floor(lr: f64, min_lr: f64) -> bool {
    lr <= min_lr * (1.0 + 1e-9)
}

/// One end-of-epoch decision. Pure in all of its inputs.
///
/// The plateau counter resets on improvement and after every triggered
/// action; the stagnation counter resets only on improvement.
pub fn controller_update(
    state: &ControllerState,
    val_ccc: f64,
    releasable_groups: usize,
    config: &TrainerConfig,
) -> ControllerStep {
    let mut next = state.clone();
    let improved = val_ccc > state.best_val_ccc;
    if improved {
        next.best_val_ccc = val_ccc;
        next.plateau_counter = 0;
        next.stagnation_counter = 0;
    } else {
        next.plateau_counter += 1;
        next.stagnation_counter += 1;
    }
    next.epoch += 1;

    let mut action = if next.stagnation_counter >= config.early_stop {
        Action::Stop
    } else if next.plateau_counter >= config.plateau_patience {
        next.plateau_counter = 0;
        if !at_floor(next.current_lr, config.min_lr) {
            let reduced = next.current_lr * config.lr_factor;
            next.current_lr = if at_floor(reduced, config.min_lr) { config.min_lr } else { reduced };
            Action::ReduceLr
        } else if next.released_group_count < releasable_groups {
            next.released_group_count += 1;
            Action::ReleaseGroup
        } else {
            Action::Stop
        }
    } else {
        Action::None
    };
    if next.epoch >= config.max_epochs {
        action = Action::Stop;
    }
    ControllerStep { state: next, action, improved }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub plateau_counter: usize,
    pub stagnation_counter: usize,
    pub train_ccc: f64,
    pub val_ccc: f64,
    pub action: Action,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,plateau_counter,stagnation_counter,train_ccc,val_ccc,action\n");
    for r in history {
        out.push_str(&format!(
            "{},{:e},{},{},{},{},{}\n",
            r.epoch, r.lr, r.plateau_counter, r.stagnation_counter, r.train_ccc, r.val_ccc, r.action
        ));
    }
    out
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

fn window_loss<T: Scalar>(
    model: &FusionModel<T>,
    ctx: &Forward<'_, T>,
    batch: &[&Window<T>],
) -> Result<(crate::autodiff::Var, Vec<T>)> {
    let tape = ctx.tape;
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for w in batch {
        let out = model.forward(ctx, &w.input)?;
        preds.push(if w.valid < w.input.frames() { tape.slice(out, 0, 0, w.valid)? } else { out });
        targets.extend_from_slice(&w.target);
    }
    let pred = tape.concat(&preds, 0)?;
    let target = tape.constant(Tensor::vector(targets)?);
    let loss = ccc_loss(tape, pred, target)?;
    let values = tape.value(pred).data().to_vec();
    Ok((loss, values))
}

/// One pass over shuffled windows; returns the CCC of the training-mode
/// predictions against the targets over all frames of the epoch.
pub fn train_epoch<T: Scalar>(
    model: &mut FusionModel<T>,
    windows: &[Window<T>],
    adam: &mut AdamState<T>,
    trainable: &[bool],
    lr: f64,
    config: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no training windows".into()));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(rng);
    let mut all_pred = Vec::new();
    let mut all_target = Vec::new();
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<&Window<T>> = chunk.iter().map(|&i| &windows[i]).collect();
        let tape = Tape::new();
        let grads = {
            let ctx = Forward::train(&tape, &model.store, trainable, rng);
            let (loss, preds) = window_loss(model, &ctx, &batch)?;
            all_pred.extend(preds.iter().map(|v| v.as_f64()));
            let grads = tape.backward(loss)?;
            ctx.param_vars().iter().map(|&v| grads.get(v).cloned()).collect::<Vec<_>>()
        };
        adam.step(&mut model.store, &grads, trainable, lr, config.weight_decay)?;
        for w in &batch {
            all_target.extend(w.target.iter().map(|v| v.as_f64()));
        }
    }
    ccc(&all_pred, &all_target)
}

/// Evaluation-mode predictions on the valid frames of each window.
pub fn predict_windows<T: Scalar>(model: &FusionModel<T>, windows: &[Window<T>]) -> Result<Vec<Vec<T>>> {
    windows
        .par_iter()
        .map(|w| {
            let mut p = model.predict(&w.input)?;
            p.truncate(w.valid);
            Ok(p)
        })
        .collect()
}

/// Global CCC over the concatenation of all window frames.
pub fn evaluate<T: Scalar>(model: &FusionModel<T>, windows: &[Window<T>]) -> Result<f64> {
    let preds: Vec<f64> = predict_windows(model, windows)?.into_iter().flatten().map(|v| v.as_f64()).collect();
    let targets: Vec<f64> = windows.iter().flat_map(|w| w.target.iter().map(|v| v.as_f64())).collect();
    ccc(&preds, &targets)
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_val_ccc: f64,
}

/// Full training run. On return `model` holds the best parameters.
pub fn fit<T: Scalar>(
    model: &mut FusionModel<T>,
    train: &[Window<T>],
    validation: &[Window<T>],
    config: &TrainerConfig,
) -> Result<FitResult> {
    config.validate()?;
    if validation.is_empty() {
        return Err(Error::InvalidArgument("no validation windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = AdamState::new(model.store.len());
    let releasable = model.freezable_group_count();
    let mut state = ControllerState::new(config);
    let mut best = model.store.tensors();
    let mut history = Vec::new();
    loop {
        let trainable = model.trainable_mask(state.released_group_count, config.freeze_backbone);
        let lr = state.current_lr;
        let train_ccc = train_epoch(model, train, &mut adam, &trainable, lr, config, &mut rng)?;
        let val_ccc = evaluate(model, validation)?;
        let step = controller_update(&state, val_ccc, releasable, config);
        if step.improved {
            best = model.store.tensors();
        }
        model.store.load(best.clone())?;
        log::info!(
            "epoch {} lr {:e} train {:.4} val {:.4} best {:.4} -> {}",
            state.epoch,
            lr,
            train_ccc,
            val_ccc,
            step.state.best_val_ccc,
            step.action
        );
        history.push(EpochRecord {
            epoch: state.epoch,
            lr,
            plateau_counter: step.state.plateau_counter,
            stagnation_counter: step.state.stagnation_counter,
            train_ccc,
            val_ccc,
            action: step.action,
        });
        state = step.state;
        if step.action == Action::Stop {
            break;
        }
    }
    Ok(FitResult { history, best_val_ccc: state.best_val_ccc })
}

/// Per-frame trace for a whole trial: windowed forward passes, averaged
/// where windows overlap.
pub fn predict_trial<T: Scalar>(model: &FusionModel<T>, input: &SequenceInput<T>, spec: &WindowSpec) -> Result<Vec<T>> {
    spec.validate()?;
    let frames = input.frames();
    for (name, stream) in [("mfcc", &input.mfcc), ("vggish", &input.vggish)] {
        if let Some(s) = stream {
            if s.shape().get(1) != Some(&frames) {
                return Err(Error::shape("predict_trial", format!("{name} length differs from visual ({frames})")));
            }
        }
    }
    if frames == 0 {
        return Err(Error::InvalidArgument("empty trial".into()));
    }
    let mut sum = vec![T::zero(); frames];
    let mut count = vec![0usize; frames];
    for start in window_starts(frames, spec) {
        let window = input.window(start, spec.length)?;
        let pred = model.predict(&window)?;
        let valid = (frames - start).min(spec.length);
        for i in 0..valid {
            sum[start + i] += pred[i];
            count[start + i] += 1;
        }
    }
    Ok(sum.into_iter().zip(count).map(|(s, c)| s / T::lit(c as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        assert!(TrainerConfig { min_lr: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainerConfig { lr_factor: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn single_reduction_lands_on_min_lr() {
        let cfg = TrainerConfig::default();
        let mut state = ControllerState::new(&cfg);
        let mut actions = Vec::new();
        for _ in 0..6 {
            let step = controller_update(&state, 0.0, 2, &cfg);
            actions.push(step.action);
            state = step.state;
        }
        assert_eq!(actions[5], Action::ReduceLr);
        assert_eq!(state.current_lr, cfg.min_lr);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(0.0));
        let mut adam = AdamState::new(1);
        adam.step(&mut store, &[Some(Tensor::scalar(1.0))], &[true], 1e-3, 0.0).unwrap();
        let w = store.get(crate::nn::ParamId(0)).data()[0];
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }
}

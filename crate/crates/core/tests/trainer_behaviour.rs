mod common;

use affuse_core::data::dataset::{make_windows, TrialData, Window};
use affuse_core::data::synthetic::{generate, SyntheticSpec};
use affuse_core::data::windows::WindowSpec;
use affuse_core::data::Dimension;
use affuse_core::fusion::{FusionModel, Heads, ModelKind, SequenceInput};
use affuse_core::nn::ParamStore;
use affuse_core::tensor::Tensor;
use affuse_core::trainer::{
    controller_update, evaluate, fit, history_csv, predict_trial, train_epoch, Action, AdamState, ControllerState,
    TrainerConfig,
};
use common::{normal, rng, small_config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_store(v: f64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![v]).unwrap());
    store
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut store = scalar_store(0.7);
    let mut adam = AdamState::new(1);
    for _ in 0..3 {
        adam.step(&mut store, &[Some(Tensor::vector(vec![0.0]).unwrap())], &[true], 1e-2, 0.0).unwrap();
    }
    assert_eq!(store.get(affuse_core::nn::ParamId(0)).data(), &[0.7]);
}

#[test]
fn adam_single_step_matches_hand_recurrence() {
    let (lr, b1, b2, eps) = (1e-3, 0.9f64, 0.999f64, 1e-8);
    let mut store = scalar_store(0.5);
    let mut adam = AdamState::new(1);
    let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.5f64);
    for (t, g) in [1.0f64, -0.3, 2.0].into_iter().enumerate() {
        adam.step(&mut store, &[Some(Tensor::vector(vec![g]).unwrap())], &[true], lr, 1e-4).unwrap();
        let g = g + 1e-4 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let step = (t + 1) as i32;
        w -= lr * (m / (1.0 - b1.powi(step))) / ((v / (1.0 - b2.powi(step))).sqrt() + eps);
        assert!((store.get(affuse_core::nn::ParamId(0)).data()[0] - w).abs() < 1e-15);
        if t == 0 {
            // first step moves by almost exactly lr
            assert!((0.5 - w - lr).abs() < 1e-8);
        }
    }
}

#[test]
fn adam_descends_quadratic_bowl() {
    let mut store = scalar_store(1.0);
    let mut adam = AdamState::new(1);
    for _ in 0..500 {
        let w = store.get(affuse_core::nn::ParamId(0)).data()[0];
        adam.step(&mut store, &[Some(Tensor::vector(vec![2.0 * w]).unwrap())], &[true], 1e-2, 0.0).unwrap();
    }
    assert!(store.get(affuse_core::nn::ParamId(0)).data()[0].abs() < 1e-2);
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut store = scalar_store(1.0);
    let mut adam = AdamState::new(1);
    let grad = Some(Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(adam.step(&mut store, &[grad], &[true], 1e-2, 0.0).is_err());
}

fn run_controller(vals: &[f64], groups: usize, config: &TrainerConfig) -> Vec<(usize, Action)> {
    let mut state = ControllerState::new(config);
    let mut events = Vec::new();
    for (epoch, &v) in vals.iter().enumerate() {
        let step = controller_update(&state, v, groups, config);
        assert_eq!(step, controller_update(&state, v, groups, config));
        assert!(step.state.best_val_ccc >= state.best_val_ccc);
        state = step.state;
        if step.action != Action::None {
            events.push((epoch, step.action));
        }
        if step.action == Action::Stop {
            break;
        }
    }
    events
}

#[test]
fn controller_tables() {
    let cfg = TrainerConfig::default();
    let flat = vec![0.3; 200];
    assert_eq!(
        run_controller(&flat, 2, &cfg),
        vec![(5, Action::ReduceLr), (10, Action::ReleaseGroup), (15, Action::ReleaseGroup), (20, Action::Stop)]
    );

    let improving: Vec<f64> = (0..200).map(|i| i as f64 / 1000.0).collect();
    assert_eq!(run_controller(&improving, 2, &cfg), vec![(99, Action::Stop)]);

    let short = TrainerConfig { early_stop: 12, ..TrainerConfig::default() };
    assert_eq!(
        run_controller(&flat, 3, &short),
        vec![(5, Action::ReduceLr), (10, Action::ReleaseGroup), (12, Action::Stop)]
    );

    // plenty of groups: stagnation ends the run at 20
    assert_eq!(
        run_controller(&flat, 9, &cfg),
        vec![(5, Action::ReduceLr), (10, Action::ReleaseGroup), (15, Action::ReleaseGroup), (20, Action::Stop)]
    );

    // an improvement at epoch 7 resets both counters
    let mut bump = flat.clone();
    bump[7] = 0.5;
    assert_eq!(
        run_controller(&bump, 2, &cfg),
        vec![(5, Action::ReduceLr), (12, Action::ReleaseGroup), (17, Action::ReleaseGroup), (22, Action::Stop)]
    );
}

#[test]
fn controller_lr_floor() {
    let cfg = TrainerConfig::default();
    let mut state = ControllerState::new(&cfg);
    for _ in 0..6 {
        state = controller_update(&state, 0.0, 2, &cfg).state;
    }
    assert_eq!(state.current_lr, cfg.min_lr);

    let cfg = TrainerConfig { lr: 1e-2, min_lr: 1e-5, ..TrainerConfig::default() };
    let mut state = ControllerState::new(&cfg);
    let mut lrs = Vec::new();
    for _ in 0..40 {
        let step = controller_update(&state, 0.0, 5, &cfg);
        if step.action == Action::ReduceLr {
            lrs.push(step.state.current_lr);
        }
        state = step.state;
    }
    assert_eq!(lrs.len(), 3);
    assert!((lrs[0] - 1e-3).abs() < 1e-15 && (lrs[1] - 1e-4).abs() < 1e-16);
    assert_eq!(lrs[2], 1e-5);
}

fn synthetic(kind: ModelKind, trials: usize, frames: usize, seed: u64) -> Vec<TrialData<f64>> {
    let cfg = small_config(kind);
    let spec = SyntheticSpec {
        train_subjects: trials,
        validation_subjects: 0,
        test_subjects: 0,
        frames,
        visual_dim: cfg.visual_dim,
        mfcc_dim: cfg.mfcc_dim,
        vggish_dim: cfg.vggish_dim,
        ..SyntheticSpec::default()
    };
    generate(&spec, seed).unwrap().iter().map(|t| t.trial_data(kind, Dimension::Valence).unwrap()).collect()
}

fn windows(trials: &[TrialData<f64>]) -> Vec<Window<f64>> {
    make_windows(trials, &WindowSpec { length: 30, hop: 20 }).unwrap()
}

fn epoch_run(lr: f64, seed: u64) -> (f64, Vec<Tensor<f64>>) {
    let data = windows(&synthetic(ModelKind::Multimodal, 4, 70, 3));
    let mut model = FusionModel::<f64>::new(small_config(ModelKind::Multimodal), &mut rng(0)).unwrap();
    let cfg = TrainerConfig { lr, freeze_backbone: false, ..TrainerConfig::default() };
    let mask = model.trainable_mask(0, false);
    let mut adam = AdamState::new(model.store.len());
    let ccc = train_epoch(&mut model, &data, &mut adam, &mask, lr, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (ccc, model.store.tensors())
}

#[test]
fn train_epoch_is_deterministic_and_finite() {
    let (a, pa) = epoch_run(1e-3, 9);
    let (b, pb) = epoch_run(1e-3, 9);
    assert!(a.is_finite());
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(pa, pb);
    assert!(pa.iter().all(Tensor::is_finite));
}

#[test]
fn zero_lr_leaves_parameters_unchanged() {
    let before = FusionModel::<f64>::new(small_config(ModelKind::Multimodal), &mut rng(0)).unwrap().store.tensors();
    let (a, after) = epoch_run(0.0, 4);
    let (b, _) = epoch_run(0.0, 4);
    assert_eq!(before, after);
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn frozen_groups_stay_bit_identical() {
    let data = windows(&synthetic(ModelKind::Multimodal, 4, 70, 3));
    let mut model = FusionModel::<f64>::new(small_config(ModelKind::Multimodal), &mut rng(0)).unwrap();
    let cfg = TrainerConfig { lr: 1e-2, ..TrainerConfig::default() };
    let mask = model.trainable_mask(1, true);
    let before = model.store.tensors();
    let mut adam = AdamState::new(model.store.len());
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        train_epoch(&mut model, &data, &mut adam, &mask, cfg.lr, &cfg, &mut r).unwrap();
    }
    let groups = model.parameter_groups();
    let after = model.store.tensors();
    for id in &groups[1].params {
        assert_eq!(before[id.0], after[id.0], "frozen {}", model.store.entries()[id.0].name);
    }
    assert!(groups[0].params.iter().any(|id| before[id.0] != after[id.0]));
    assert!(groups[2].params.iter().any(|id| before[id.0] != after[id.0]));
}

#[test]
fn fit_tracks_best_snapshot() {
    let train = windows(&synthetic(ModelKind::Multimodal, 4, 70, 3));
    let val = windows(&synthetic(ModelKind::Multimodal, 2, 70, 8));
    let mut model = FusionModel::<f64>::new(small_config(ModelKind::Multimodal), &mut rng(0)).unwrap();
    let cfg = TrainerConfig { lr: 3e-3, min_lr: 3e-4, max_epochs: 12, freeze_backbone: true, ..TrainerConfig::default() };
    let result = fit(&mut model, &train, &val, &cfg).unwrap();
    assert!(result.history.len() <= cfg.max_epochs);
    let best: Vec<f64> = result
        .history
        .iter()
        .scan(f64::NEG_INFINITY, |b, r| {
            *b = b.max(r.val_ccc);
            Some(*b)
        })
        .collect();
    assert!(best.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*best.last().unwrap(), result.best_val_ccc);
    assert_eq!(evaluate(&model, &val).unwrap(), result.best_val_ccc);
    let csv = history_csv(&result.history);
    assert!(csv.starts_with("epoch,lr,plateau_counter,stagnation_counter,train_ccc,val_ccc,action\n"));
    assert_eq!(csv.lines().count(), result.history.len() + 1);
}

#[test]
fn fit_on_noise_stops_early() {
    let mut train = synthetic(ModelKind::Unimodal, 4, 60, 3);
    let mut val = synthetic(ModelKind::Unimodal, 2, 60, 4);
    let mut r = rng(11);
    for t in train.iter_mut().chain(val.iter_mut()) {
        let n = t.frames();
        t.target = Some(normal(&[n], 0.3, &mut r).into_data().into_iter().map(|v: f64| v.clamp(-1.0, 1.0)).collect());
    }
    let mut model = FusionModel::<f64>::new(small_config(ModelKind::Unimodal), &mut rng(0)).unwrap();
    let cfg = TrainerConfig { lr: 3e-2, min_lr: 3e-3, ..TrainerConfig::default() };
    let result = fit(&mut model, &windows(&train), &windows(&val), &cfg).unwrap();
    assert!(result.history.len() < cfg.max_epochs, "ran {} epochs", result.history.len());
    assert_eq!(result.history.last().unwrap().action, Action::Stop);
}

fn columns(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let rows = x.shape()[0];
    let t = x.shape()[1];
    let mut data = Vec::new();
    for r in 0..rows {
        for c in start..start + len {
            data.push(if c < t { x.at(r, c) } else { 0.0 });
        }
    }
    Tensor::new(vec![rows, len], data).unwrap()
}

#[test]
fn predict_trial_stitches_overlaps() {
    let cfg = small_config(ModelKind::Unimodal);
    let mut model = FusionModel::<f64>::new(cfg.clone(), &mut rng(0)).unwrap();
    common::randomize(&mut model, 0.5, 1);
    let visual = normal(&[cfg.visual_dim, 700], 1.0, &mut rng(2));
    let input = SequenceInput { visual: visual.clone(), mfcc: None, vggish: None };
    let trace = predict_trial(&model, &input, &WindowSpec::default()).unwrap();
    assert_eq!(trace.len(), 700);
    let w: Vec<Vec<f64>> = [0, 200, 400]
        .iter()
        .map(|&s| model.predict(&SequenceInput { visual: columns(&visual, s, 300), mfcc: None, vggish: None }).unwrap())
        .collect();
    for f in 0..700 {
        let expected = match f {
            0..200 => w[0][f],
            200..300 => (w[0][f] + w[1][f - 200]) / 2.0,
            300..400 => w[1][f - 200],
            400..500 => (w[1][f - 200] + w[2][f - 400]) / 2.0,
            _ => w[2][f - 400],
        };
        assert!((trace[f] - expected).abs() < 1e-15, "frame {f}");
    }

    let short = SequenceInput { visual: columns(&visual, 0, 300), mfcc: None, vggish: None };
    assert_eq!(predict_trial(&model, &short, &WindowSpec::default()).unwrap(), w[0]);
}

#[test]
fn constant_model_gives_constant_trace() {
    let cfg = small_config(ModelKind::Multimodal);
    let mut model = FusionModel::<f64>::new(cfg.clone(), &mut rng(0)).unwrap();
    let Heads::Multimodal(parts) = &model.heads else { unreachable!() };
    let (w, b) = (parts.fusion_head.weight, parts.fusion_head.bias);
    *model.store.get_mut(w) = Tensor::zeros(&[1, cfg.fused_width()]);
    *model.store.get_mut(b) = Tensor::vector(vec![-0.375]).unwrap();
    let mut r = rng(3);
    let input = SequenceInput {
        visual: normal(&[cfg.visual_dim, 650], 1.0, &mut r),
        mfcc: Some(normal(&[cfg.mfcc_dim, 650], 1.0, &mut r)),
        vggish: Some(normal(&[cfg.vggish_dim, 650], 1.0, &mut r)),
    };
    let trace = predict_trial(&model, &input, &WindowSpec::default()).unwrap();
    assert!(trace.iter().all(|&v| v == -0.375));

    let bad = SequenceInput { mfcc: Some(normal(&[cfg.mfcc_dim, 600], 1.0, &mut r)), ..input };
    assert!(predict_trial(&model, &bad, &WindowSpec::default()).is_err());
}

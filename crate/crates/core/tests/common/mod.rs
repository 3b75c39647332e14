#![allow(dead_code)]

use affuse_core::autodiff::{Tape, Var};
use affuse_core::fusion::{FusionModel, ModelConfig, ModelKind};
use affuse_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ out ⊙ proj` with a fixed random projection scaled to keep the loss O(1).
pub fn projection_loss(tape: &Tape<f64>, out: Var, seed: u64) -> affuse_core::Result<Var> {
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    let proj = normal(&shape, 1.0 / (n as f64).sqrt(), &mut rng(seed ^ 0xabcdef));
    let proj = tape.constant(proj);
    tape.sum(tape.mul(out, proj)?)
}

/// Tiny three-branch configuration for exhaustive gradient checks.
pub fn small_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        visual_dim: 5,
        mfcc_dim: 3,
        vggish_dim: 4,
        visual_channels: 4,
        aural_channels: 3,
        levels: 2,
        kernel_size: 3,
        dropout: 0.1,
        key_dim: 2,
        layer_norm_eps: 1e-5,
    }
}

/// Replaces every parameter with `N(0, scale²)` draws so activations sit
/// well away from ReLU kinks.
pub fn randomize(model: &mut FusionModel<f64>, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let tensors = model.store.tensors().iter().map(|t| normal(t.shape(), scale, &mut r)).collect();
    model.store.load(tensors).unwrap();
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use affuse_core::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use affuse_core::nn::{Forward, ParamStore};

/// Gradient check over every parameter in `store` plus the given inputs.
/// `build` sees the parameters through a `Forward` and the inputs as vars.
pub fn check_block<F>(name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: F) -> GradCheckReport
where
    F: Fn(&Forward<'_, f64>, &[Var]) -> affuse_core::Result<Var>,
{
    let n_params = store.len();
    let mut leaves = store.tensors();
    leaves.extend(inputs.iter().cloned());
    check_gradients(
        name,
        &leaves,
        |tape, vars| {
            let ctx = Forward::from_vars(tape, vars[..n_params].to_vec());
            build(&ctx, &vars[n_params..])
        },
        &GradCheckOptions::default(),
    )
    .unwrap()
}

pub fn randomize_store(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let tensors = store.tensors().iter().map(|t| normal(t.shape(), scale, &mut r)).collect();
    store.load(tensors).unwrap();
}

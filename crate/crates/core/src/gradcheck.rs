//! Central finite-difference gradient verification.
//!
//! The numeric side only evaluates forward passes on fresh tapes where every
//! input is a constant, so it never touches the reverse-mode code it checks.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(leaf, flat index, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor: below this magnitude errors are effectively absolute.
    pub floor: f64,
    /// When set, at most this many evenly spaced coordinates per leaf.
    pub max_coords_per_leaf: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-4, max_coords_per_leaf: None }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<T: Scalar, F>(leaves: &[Tensor<T>], f: &F) -> Result<f64>
where
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
    let loss = f(&tape, &vars)?;
    let value = tape.value(loss);
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.data()[0].as_f64())
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every (or a sampled subset of) leaf coordinate.
pub fn check_gradients<T: Scalar, F>(
    name: &str,
    leaves: &[Tensor<T>],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.param(l.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut coordinates = 0;
    let mut work = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").clone();
        let n = leaves[li].len();
        let stride = match opts.max_coords_per_leaf {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = leaves[li].data()[idx];
            work[li].data_mut()[idx] = orig + T::lit(opts.step);
            let plus = eval_loss(&work, &f)?;
            work[li].data_mut()[idx] = orig - T::lit(opts.step);
            let minus = eval_loss(&work, &f)?;
            work[li].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[idx].as_f64();
            let err = relative_error(a, numeric, opts.floor);
            if err > worst || worst_at.is_none() {
                worst = worst.max(err);
                worst_at = Some((li, idx, a, numeric));
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport { name: name.to_string(), max_rel_error: worst, coordinates, worst: worst_at })
}

/// Gradient checks over every building block (small fixed sizes, all
/// coordinates) and both model kinds built from `config` at `frames` time
/// steps, with the CCC loss against a random target.
///
/// Parameters are redrawn with fan-in scaled normals so ReLU inputs are of
/// order one; a finite-difference step then rarely straddles a kink.
pub mod suite {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::{check_gradients, GradCheckOptions, GradCheckReport};
    use crate::autodiff::{Tape, Var};
    use crate::error::Result;
    use crate::fusion::{cross_modal_attention, BranchEncoder, FusionModel, ModelConfig, ModelKind};
    use crate::metrics::ccc_loss;
    use crate::nn::{DilatedCausalConv, Forward, LayerNorm, Linear, ParamStore, TcnConfig, TcnStack, TemporalBlock};
    use crate::tensor::Tensor;

    fn normal(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("finite draws")
    }

    fn redraw(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
        let tensors = store
            .tensors()
            .iter()
            .map(|t| {
                let fan_in: usize = t.shape()[1..].iter().product();
                let scale = if t.shape().len() == 1 { 0.3 } else { (2.0 / fan_in as f64).sqrt() };
                normal(t.shape(), scale, rng)
            })
            .collect();
        store.load(tensors)
    }

    fn projection(tape: &Tape<f64>, out: Var, rng_seed: u64) -> Result<Var> {
        let shape = tape.shape(out);
        let n: usize = shape.iter().product();
        let proj = normal(&shape, 1.0 / (n as f64).sqrt(), &mut ChaCha8Rng::seed_from_u64(rng_seed));
        let proj = tape.constant(proj);
        tape.sum(tape.mul(out, proj)?)
    }

    fn check<F>(name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&Forward<'_, f64>, &[Var]) -> Result<Var>,
    {
        let n = store.len();
        let mut leaves = store.tensors();
        leaves.extend(inputs.iter().cloned());
        check_gradients(
            name,
            &leaves,
            |tape, vars| {
                let ctx = Forward::from_vars(tape, vars[..n].to_vec());
                f(&ctx, &vars[n..])
            },
            opts,
        )
    }

    pub fn run(config: &ModelConfig, frames: usize, seed: u64, model_coords: Option<usize>) -> Result<Vec<GradCheckReport>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exhaustive = GradCheckOptions::default();
        let x = normal(&[6, frames], 1.0, &mut rng);
        let mut reports = Vec::new();

        let mut store = ParamStore::new();
        let linear = Linear::new(&mut store, "linear", 6, 4, &mut rng);
        redraw(&mut store, &mut rng)?;
        reports.push(check("linear", &store, std::slice::from_ref(&x), &exhaustive, |ctx, v| {
            projection(ctx.tape, linear.forward(ctx, v[0])?, seed)
        })?);

        let mut store = ParamStore::new();
        let conv = DilatedCausalConv::new(&mut store, "conv", 6, 4, 3, 2, &mut rng);
        redraw(&mut store, &mut rng)?;
        reports.push(check("dilated_causal_conv", &store, std::slice::from_ref(&x), &exhaustive, |ctx, v| {
            projection(ctx.tape, conv.forward(ctx, v[0])?, seed)
        })?);

        for (name, out) in [("temporal_block", 4), ("temporal_block_identity", 6)] {
            let mut store = ParamStore::new();
            let block = TemporalBlock::new(&mut store, name, 6, out, 3, 2, config.dropout, &mut rng);
            redraw(&mut store, &mut rng)?;
            reports.push(check(name, &store, std::slice::from_ref(&x), &exhaustive, |ctx, v| {
                projection(ctx.tape, block.forward(ctx, v[0])?, seed)
            })?);
        }

        let mut store = ParamStore::new();
        let tcn_cfg = TcnConfig { input_dim: 6, channels: 4, levels: 2, kernel_size: 3, dropout: config.dropout };
        let stack = TcnStack::new(&mut store, "tcn", tcn_cfg, &mut rng);
        redraw(&mut store, &mut rng)?;
        reports.push(check("tcn_stack", &store, std::slice::from_ref(&x), &exhaustive, |ctx, v| {
            projection(ctx.tape, stack.forward(ctx, v[0])?, seed)
        })?);

        let mut store = ParamStore::new();
        let encoder = BranchEncoder::new(&mut store, "encoder", 6, 3, &mut rng);
        redraw(&mut store, &mut rng)?;
        reports.push(check("branch_encoder", &store, std::slice::from_ref(&x), &exhaustive, |ctx, v| {
            let (q, k, val) = encoder.encode(ctx, v[0])?;
            let joined = ctx.tape.concat(&[q, k, val], 0)?;
            projection(ctx.tape, joined, seed)
        })?);

        let mut store = ParamStore::new();
        let norm = LayerNorm::new(&mut store, "attention_norm", 9, config.layer_norm_eps);
        redraw(&mut store, &mut rng)?;
        let qkv: Vec<Tensor<f64>> = (0..9).map(|_| normal(&[3, frames], 1.0, &mut rng)).collect();
        reports.push(check("fusion_attention", &store, &qkv, &exhaustive, |ctx, v| {
            let triplets: Vec<(Var, Var, Var)> = (0..3).map(|b| (v[3 * b], v[3 * b + 1], v[3 * b + 2])).collect();
            let attention = cross_modal_attention(ctx, &triplets)?;
            projection(ctx.tape, norm.forward(ctx, attention)?, seed)
        })?);

        let model_opts = GradCheckOptions { max_coords_per_leaf: model_coords, ..GradCheckOptions::default() };
        for kind in [ModelKind::Unimodal, ModelKind::Multimodal] {
            let cfg = ModelConfig { kind, ..config.clone() };
            let mut model = FusionModel::<f64>::new(cfg.clone(), &mut rng)?;
            redraw(&mut model.store, &mut rng)?;
            let mut inputs = vec![normal(&[cfg.visual_dim, frames], 1.0, &mut rng)];
            if kind == ModelKind::Multimodal {
                inputs.push(normal(&[cfg.mfcc_dim, frames], 1.0, &mut rng));
                inputs.push(normal(&[cfg.vggish_dim, frames], 1.0, &mut rng));
            }
            let target = normal(&[frames], 0.5, &mut rng);
            let name = match kind {
                ModelKind::Unimodal => "unimodal_model",
                ModelKind::Multimodal => "multimodal_model",
            };
            reports.push(check(name, &model.store, &inputs, &model_opts, |ctx, v| {
                let pred = match kind {
                    ModelKind::Unimodal => model.forward_unimodal(ctx, v[0])?,
                    ModelKind::Multimodal => model.forward_multimodal(ctx, v[0], v[1], v[2])?,
                };
                ccc_loss(ctx.tape, pred, ctx.tape.constant(target.clone()))
            })?);
        }
        Ok(reports)
    }
}

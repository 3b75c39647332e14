//! Neural building blocks: linear maps, dilated causal convolutions, the TCN
//! residual stack, layer normalization and dropout.
//!
//! All sequence tensors are laid out `[features × time]`.

use std::cell::RefCell;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Flat list of parameters in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn load(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::shape(
                "load_params",
                format!("expected {} tensors, got {}", self.entries.len(), tensors.len()),
            ));
        }
        for (entry, t) in self.entries.iter().zip(&tensors) {
            if entry.value.shape() != t.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("{}: {:?} vs {:?}", entry.name, entry.value.shape(), t.shape()),
                ));
            }
        }
        for (entry, t) in self.entries.iter_mut().zip(tensors) {
            entry.value = t;
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// One forward pass: the tape, the tape handle of every parameter and the
/// dropout source (absent in evaluation mode).
pub struct Forward<'a, T> {
    pub tape: &'a Tape<T>,
    params: Vec<Var>,
    rng: Option<RefCell<&'a mut dyn RngCore>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// Evaluation mode; every parameter is differentiable.
    pub fn eval(tape: &'a Tape<T>, store: &ParamStore<T>) -> Self {
        let params = store.entries.iter().map(|e| tape.param(e.value.clone())).collect();
        Self { tape, params, rng: None }
    }

    /// Training mode with dropout. Parameters whose `trainable` flag is
    /// false enter the tape as constants.
    pub fn train(tape: &'a Tape<T>, store: &ParamStore<T>, trainable: &[bool], rng: &'a mut dyn RngCore) -> Self {
        let params = store
            .entries
            .iter()
            .zip(trainable)
            .map(|(e, &on)| if on { tape.param(e.value.clone()) } else { tape.constant(e.value.clone()) })
            .collect();
        Self { tape, params, rng: Some(RefCell::new(rng)) }
    }

    /// Evaluation mode over parameters already recorded on `tape`.
    pub fn from_vars(tape: &'a Tape<T>, params: Vec<Var>) -> Self {
        Self { tape, params, rng: None }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }
}

/// Inverted dropout. Identity in evaluation mode or when `rate == 0`.
pub fn dropout<T: Scalar>(ctx: &Forward<'_, T>, x: Var, rate: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let Some(rng) = &ctx.rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let shape = ctx.tape.shape(x);
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut rng = rng.borrow_mut();
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mask = ctx.tape.constant(Tensor::from_parts(shape, mask));
    ctx.tape.mul(x, mask)
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut dyn RngCore) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

fn glorot_tensor<T: Scalar>(out_dim: usize, in_dim: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
    Tensor::from_parts(vec![out_dim, in_dim], data)
}

/// Affine map applied independently at every time step.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_tensor(out_dim, in_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    /// `[in×T] -> [out×T]`
    pub fn forward<T: Scalar>(&self, ctx: &Forward<'_, T>, x: Var) -> Result<Var> {
        let rows = ctx.tape.shape(x)[0];
        if rows != self.in_dim {
            return Err(Error::shape("linear", format!("expected {} input features, got {rows}", self.in_dim)));
        }
        let y = ctx.tape.matmul(ctx.param(self.weight), x)?;
        ctx.tape.add_col_bias(y, ctx.param(self.bias))
    }
}

/// Dilated causal 1-D convolution with zero left padding.
#[derive(Clone, Debug)]
pub struct DilatedCausalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl DilatedCausalConv {
    /// Weights drawn from `N(0, 0.01²)`, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(&[out_channels, in_channels, kernel_size], 0.01, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { weight, bias, in_channels, out_channels, kernel_size, dilation }
    }

    pub fn left_padding(&self) -> usize {
        (self.kernel_size - 1) * self.dilation
    }

    /// `[C_in×T] -> [C_out×T]`
    pub fn forward<T: Scalar>(&self, ctx: &Forward<'_, T>, x: Var) -> Result<Var> {
        let rows = ctx.tape.shape(x)[0];
        if rows != self.in_channels {
            return Err(Error::shape(
                "causal_conv",
                format!("expected {} channels, got {rows}", self.in_channels),
            ));
        }
        let cols = ctx.tape.im2col_causal(x, self.kernel_size, self.dilation)?;
        let w = ctx
            .tape
            .reshape(ctx.param(self.weight), &[self.out_channels, self.in_channels * self.kernel_size])?;
        let y = ctx.tape.matmul(w, cols)?;
        ctx.tape.add_col_bias(y, ctx.param(self.bias))
    }
}

/// Two equal-dilation causal convolutions with ReLU and dropout, plus a
/// residual path (1×1 projection when channel counts differ).
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub conv1: DilatedCausalConv,
    pub conv2: DilatedCausalConv,
    pub downsample: Option<DilatedCausalConv>,
    pub dropout: f64,
}

impl TemporalBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        let conv1 =
            DilatedCausalConv::new(store, &format!("{name}.conv1"), in_channels, out_channels, kernel_size, dilation, rng);
        let conv2 =
            DilatedCausalConv::new(store, &format!("{name}.conv2"), out_channels, out_channels, kernel_size, dilation, rng);
        let downsample = (in_channels != out_channels)
            .then(|| DilatedCausalConv::new(store, &format!("{name}.downsample"), in_channels, out_channels, 1, 1, rng));
        Self { conv1, conv2, downsample, dropout }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Forward<'_, T>, x: Var) -> Result<Var> {
        let tape = ctx.tape;
        let h = tape.relu(self.conv1.forward(ctx, x)?)?;
        let h = dropout(ctx, h, self.dropout)?;
        let h = tape.relu(self.conv2.forward(ctx, h)?)?;
        let h = dropout(ctx, h, self.dropout)?;
        let residual = match &self.downsample {
            Some(proj) => proj.forward(ctx, x)?,
            None => x,
        };
        tape.relu(tape.add(h, residual)?)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcnConfig {
    pub input_dim: usize,
    pub channels: usize,
    pub levels: usize,
    pub kernel_size: usize,
    pub dropout: f64,
}

impl TcnConfig {
    /// Frames that can influence one output: `1 + 2·(k−1)·(2^L − 1)`.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.kernel_size - 1) * ((1 << self.levels) - 1)
    }
}

/// Stack of temporal blocks with dilation `2^l` at level `l`.
#[derive(Clone, Debug)]
pub struct TcnStack {
    pub config: TcnConfig,
    pub blocks: Vec<TemporalBlock>,
}

impl TcnStack {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: TcnConfig, rng: &mut dyn RngCore) -> Self {
        let blocks = (0..config.levels)
            .map(|level| {
                let in_ch = if level == 0 { config.input_dim } else { config.channels };
                TemporalBlock::new(
                    store,
                    &format!("{name}.level{level}"),
                    in_ch,
                    config.channels,
                    config.kernel_size,
                    1 << level,
                    config.dropout,
                    rng,
                )
            })
            .collect();
        Self { config, blocks }
    }

    /// `[D×T] -> [C×T]`
    pub fn forward<T: Scalar>(&self, ctx: &Forward<'_, T>, x: Var) -> Result<Var> {
        self.blocks.iter().try_fold(x, |h, block| block.forward(ctx, h))
    }
}

/// Per-time-step normalization over the feature axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one()));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[dim]));
        Self { gain, shift, dim, eps }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Forward<'_, T>, x: Var) -> Result<Var> {
        ctx.tape.layer_norm_cols(x, ctx.param(self.gain), ctx.param(self.shift), T::lit(self.eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_receptive_field_is_121() {
        let cfg = TcnConfig { input_dim: 512, channels: 128, levels: 4, kernel_size: 5, dropout: 0.1 };
        assert_eq!(cfg.receptive_field(), 121);
    }

    #[test]
    fn zero_input_conv_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let conv = DilatedCausalConv::new(&mut store, "c", 3, 2, 5, 2, &mut rng);
        *store.get_mut(conv.bias) = Tensor::vector(vec![0.5, -1.5]).unwrap();
        let tape = Tape::new();
        let ctx = Forward::eval(&tape, &store);
        let x = tape.constant(Tensor::zeros(&[3, 7]));
        let y = conv.forward(&ctx, x).unwrap();
        let y = tape.value(y);
        assert_eq!(y.shape(), &[2, 7]);
        assert!(y.row(0).iter().all(|&v| v == 0.5));
        assert!(y.row(1).iter().all(|&v| v == -1.5));
    }

    #[test]
    fn dropout_identity_cases() {
        let tape = Tape::<f64>::new();
        let store = ParamStore::new();
        let x = tape.constant(Tensor::full(&[4, 5], 2.0));
        let ctx = Forward::eval(&tape, &store);
        assert_eq!(dropout(&ctx, x, 0.1).unwrap(), x);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = Forward::train(&tape, &store, &[], &mut rng);
        assert_eq!(dropout(&ctx, x, 0.0).unwrap(), x);
        assert!(dropout(&ctx, x, 1.0).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let tape = Tape::<f64>::new();
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ctx = Forward::train(&tape, &store, &[], &mut rng);
        let x = tape.constant(Tensor::full(&[1000, 1000], 1.0));
        let y = dropout(&ctx, x, 0.1).unwrap();
        let y = tape.value(y);
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / y.len() as f64;
        assert!((zeros - 0.1).abs() < 0.005);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let conv = DilatedCausalConv::new(&mut store, "c", 3, 2, 5, 1, &mut rng);
        let tape = Tape::new();
        let ctx = Forward::eval(&tape, &store);
        let x = tape.constant(Tensor::zeros(&[4, 7]));
        assert!(matches!(conv.forward(&ctx, x), Err(Error::Shape { .. })));
    }
}

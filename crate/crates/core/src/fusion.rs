//! Three-branch audio-visual model with leader-follower attentive fusion.
//!
//! The visual TCN output plays the leader: it feeds its own attention
//! encoder and also skips past the attention block to be concatenated with
//! the normalized attention feature. The two aural TCN branches only enter
//! through attention.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Forward, LayerNorm, Linear, ParamId, ParamStore, TcnConfig, TcnStack};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of fused branches: visual, mfcc, vggish.
pub const NUM_BRANCHES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Unimodal,
    Multimodal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub visual_dim: usize,
    pub mfcc_dim: usize,
    pub vggish_dim: usize,
    pub visual_channels: usize,
    pub aural_channels: usize,
    pub levels: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    pub key_dim: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Multimodal,
            visual_dim: 512,
            mfcc_dim: 39,
            vggish_dim: 128,
            visual_channels: 128,
            aural_channels: 32,
            levels: 4,
            kernel_size: 5,
            dropout: 0.1,
            key_dim: 32,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn attention_width(&self) -> usize {
        NUM_BRANCHES * self.key_dim
    }

    /// Leader width plus the flattened attention feature.
    pub fn fused_width(&self) -> usize {
        self.visual_channels + self.attention_width()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.visual_dim,
            self.mfcc_dim,
            self.vggish_dim,
            self.visual_channels,
            self.aural_channels,
            self.levels,
            self.kernel_size,
            self.key_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    fn tcn(&self, input_dim: usize, channels: usize) -> TcnConfig {
        TcnConfig { input_dim, channels, levels: self.levels, kernel_size: self.kernel_size, dropout: self.dropout }
    }
}

/// Per-branch query/key/value projections.
#[derive(Clone, Debug)]
pub struct BranchEncoder {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl BranchEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        key_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), in_dim, key_dim, rng),
            key: Linear::new(store, &format!("{name}.key"), in_dim, key_dim, rng),
            value: Linear::new(store, &format!("{name}.value"), in_dim, key_dim, rng),
        }
    }

    /// `[d_i×T] -> (Q_i, K_i, V_i)`, each `[d_K×T]`.
    pub fn encode<T: Scalar>(&self, ctx: &Forward<'_, T>, features: Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.query.forward(ctx, features)?,
            self.key.forward(ctx, features)?,
            self.value.forward(ctx, features)?,
        ))
    }

    fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value].iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Attention over per-branch `(Q_i, K_i, V_i)` triplets, before normalization.
///
/// Returns `[(B·d_K)×T]`: at each step, row `i` of `(softmax(Q Kᵀ/√d_K) + 1) V`.
pub fn cross_modal_attention<T: Scalar>(ctx: &Forward<'_, T>, branches: &[(Var, Var, Var)]) -> Result<Var> {
    if branches.len() != NUM_BRANCHES {
        return Err(Error::InvalidArgument(format!(
            "leader-follower attention needs {NUM_BRANCHES} branches, got {}",
            branches.len()
        )));
    }
    let tape = ctx.tape;
    let q: Vec<Var> = branches.iter().map(|b| b.0).collect();
    let k: Vec<Var> = branches.iter().map(|b| b.1).collect();
    let v: Vec<Var> = branches.iter().map(|b| b.2).collect();
    let (q, k, v) = (tape.concat(&q, 0)?, tape.concat(&k, 0)?, tape.concat(&v, 0)?);
    tape.leader_follower_attention(q, k, v, branches.len())
}

#[derive(Clone, Debug)]
pub struct MultimodalParts {
    pub mfcc: TcnStack,
    pub vggish: TcnStack,
    pub encoders: [BranchEncoder; NUM_BRANCHES],
    pub attention_norm: LayerNorm,
    pub fusion_head: Linear,
}

#[derive(Clone, Debug)]
pub enum Heads {
    Unimodal { head: Linear },
    Multimodal(Box<MultimodalParts>),
}

/// A named, ordered set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: &'static str,
    pub params: Vec<ParamId>,
    /// Frozen until released by the training controller.
    pub freezable: bool,
}

/// Model parameters plus the layer structure that reads them.
#[derive(Clone, Debug)]
pub struct FusionModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub visual: TcnStack,
    pub heads: Heads,
}

/// Per-modality `[D×T]` inputs for one sequence.
#[derive(Clone, Debug)]
pub struct SequenceInput<T> {
    pub visual: Tensor<T>,
    pub mfcc: Option<Tensor<T>>,
    pub vggish: Option<Tensor<T>>,
}

impl<T: Scalar> SequenceInput<T> {
    pub fn frames(&self) -> usize {
        self.visual.shape().get(1).copied().unwrap_or(0)
    }
}

fn stack_params(stack: &TcnStack) -> Vec<ParamId> {
    stack
        .blocks
        .iter()
        .flat_map(|b| {
            let mut ids = vec![b.conv1.weight, b.conv1.bias, b.conv2.weight, b.conv2.bias];
            if let Some(d) = &b.downsample {
                ids.extend([d.weight, d.bias]);
            }
            ids
        })
        .collect()
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let visual = TcnStack::new(&mut store, "visual", config.tcn(config.visual_dim, config.visual_channels), rng);
        let heads = match config.kind {
            ModelKind::Unimodal => {
                Heads::Unimodal { head: Linear::new(&mut store, "visual_head", config.visual_channels, 1, rng) }
            }
            ModelKind::Multimodal => {
                let mfcc = TcnStack::new(&mut store, "mfcc", config.tcn(config.mfcc_dim, config.aural_channels), rng);
                let vggish =
                    TcnStack::new(&mut store, "vggish", config.tcn(config.vggish_dim, config.aural_channels), rng);
                let encoders = [
                    BranchEncoder::new(&mut store, "encoder.visual", config.visual_channels, config.key_dim, rng),
                    BranchEncoder::new(&mut store, "encoder.mfcc", config.aural_channels, config.key_dim, rng),
                    BranchEncoder::new(&mut store, "encoder.vggish", config.aural_channels, config.key_dim, rng),
                ];
                let attention_norm =
                    LayerNorm::new(&mut store, "attention_norm", config.attention_width(), config.layer_norm_eps);
                let fusion_head = Linear::new(&mut store, "fusion_head", config.fused_width(), 1, rng);
                assert_eq!(
                    fusion_head.in_dim,
                    visual.config.channels + encoders.iter().map(|e| e.value.out_dim).sum::<usize>(),
                    "fused width must equal leader width plus attention width"
                );
                Heads::Multimodal(Box::new(MultimodalParts { mfcc, vggish, encoders, attention_norm, fusion_head }))
            }
        };
        Ok(Self { config, store, visual, heads })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Ordered groups: visual TCN, branch encoders (multimodal only), then
    /// the always-trainable remainder.
    pub fn parameter_groups(&self) -> Vec<ParamGroup> {
        let mut groups = vec![ParamGroup { name: "visual_tcn", params: stack_params(&self.visual), freezable: true }];
        match &self.heads {
            Heads::Unimodal { head } => {
                groups.push(ParamGroup { name: "heads", params: vec![head.weight, head.bias], freezable: false });
            }
            Heads::Multimodal(parts) => {
                groups.push(ParamGroup {
                    name: "branch_encoders",
                    params: parts.encoders.iter().flat_map(BranchEncoder::params).collect(),
                    freezable: true,
                });
                let mut rest = stack_params(&parts.mfcc);
                rest.extend(stack_params(&parts.vggish));
                rest.extend([parts.attention_norm.gain, parts.attention_norm.shift]);
                rest.extend([parts.fusion_head.weight, parts.fusion_head.bias]);
                groups.push(ParamGroup { name: "aural_and_heads", params: rest, freezable: false });
            }
        }
        groups
    }

    pub fn freezable_group_count(&self) -> usize {
        self.parameter_groups().iter().filter(|g| g.freezable).count()
    }

    /// Trainable flag per parameter after `released` freezable groups have
    /// been released. With `freeze` false every parameter is trainable.
    pub fn trainable_mask(&self, released: usize, freeze: bool) -> Vec<bool> {
        let mut mask = vec![true; self.store.len()];
        if !freeze {
            return mask;
        }
        for (i, group) in self.parameter_groups().iter().filter(|g| g.freezable).enumerate() {
            if i >= released {
                for id in &group.params {
                    mask[id.0] = false;
                }
            }
        }
        mask
    }

    pub fn forward_unimodal(&self, ctx: &Forward<'_, T>, visual: Var) -> Result<Var> {
        let Heads::Unimodal { head } = &self.heads else {
            return Err(Error::InvalidArgument("model is multimodal".into()));
        };
        let features = self.visual.forward(ctx, visual)?;
        let out = head.forward(ctx, features)?;
        let t = ctx.tape.shape(out)[1];
        ctx.tape.reshape(out, &[t])
    }

    pub fn forward_multimodal(&self, ctx: &Forward<'_, T>, visual: Var, mfcc: Var, vggish: Var) -> Result<Var> {
        let Heads::Multimodal(parts) = &self.heads else {
            return Err(Error::InvalidArgument("model is unimodal".into()));
        };
        let tape = ctx.tape;
        let lens = [visual, mfcc, vggish].map(|v| tape.shape(v).get(1).copied().unwrap_or(0));
        if lens[1] != lens[0] || lens[2] != lens[0] {
            return Err(Error::shape("forward_multimodal", format!("modality lengths differ: {lens:?}")));
        }
        let leader = self.visual.forward(ctx, visual)?;
        let follower_a = parts.mfcc.forward(ctx, mfcc)?;
        let follower_b = parts.vggish.forward(ctx, vggish)?;
        let triplets = [
            parts.encoders[0].encode(ctx, leader)?,
            parts.encoders[1].encode(ctx, follower_a)?,
            parts.encoders[2].encode(ctx, follower_b)?,
        ];
        let attention = cross_modal_attention(ctx, &triplets)?;
        let attention = parts.attention_norm.forward(ctx, attention)?;
        let fused = tape.concat(&[leader, attention], 0)?;
        let out = parts.fusion_head.forward(ctx, fused)?;
        tape.reshape(out, &[lens[0]])
    }

    /// Records `input` as constants and runs the forward pass for this model kind.
    pub fn forward(&self, ctx: &Forward<'_, T>, input: &SequenceInput<T>) -> Result<Var> {
        let tape = ctx.tape;
        let visual = tape.constant(input.visual.clone());
        match self.config.kind {
            ModelKind::Unimodal => self.forward_unimodal(ctx, visual),
            ModelKind::Multimodal => {
                let (Some(mfcc), Some(vggish)) = (&input.mfcc, &input.vggish) else {
                    return Err(Error::InvalidArgument("multimodal model needs mfcc and vggish inputs".into()));
                };
                let (mfcc, vggish) = (tape.constant(mfcc.clone()), tape.constant(vggish.clone()));
                self.forward_multimodal(ctx, visual, mfcc, vggish)
            }
        }
    }

    /// Evaluation-mode per-frame predictions.
    pub fn predict(&self, input: &SequenceInput<T>) -> Result<Vec<T>> {
        let tape = crate::autodiff::Tape::new();
        let ctx = Forward::eval(&tape, &self.store);
        let out = self.forward(&ctx, input)?;
        let values = tape.value(out).data().to_vec();
        Ok(values)
    }
}

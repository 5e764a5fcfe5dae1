//! The toy in-context-conditioned diffusion transformer.
//!
//! One shared token sequence `[noisy latents; context segments]` runs
//! through pre-norm transformer blocks. Per block, the configured mode
//! decides how context tokens are handled: scored-and-pruned (token
//! selection), attended jointly or through the decoupled two-call split,
//! reused from a step cache, or bypassed entirely on layers outside the
//! active plan. Training uses a flow-matching loss with analytic gradients
//! from the autodiff tape; sampling integrates the learned velocity with an
//! Euler solver.
//!
//! Precision contract: model state (parameters, latents, caches,
//! checkpoints) is f32; all arithmetic runs in f64. During inference the
//! context pathway is rounded to f32 at block boundaries so that cached and
//! recomputed context tensors agree bit-for-bit; training skips that
//! rounding for clean gradients. The timestep signal is added only to noisy
//! rows, which makes the context pathway step-invariant and step caching
//! exact.

use crate::attention::{SequenceLayout, MASK_NEG};
use crate::autograd::{Tape, Var};
use crate::caching::{CacheEntry, LayerPlan, SessionCache};
use crate::cost::InteractionCounter;
use crate::mat::Mat;
use crate::selection::{select_topk, ImportanceScorer, SelectionResult};
use crate::tensor::{Rng, Tensor};
use crate::{CoreError, Result};

/// Width of the sinusoidal timestep feature vector.
pub const T_FEATURES: usize = 8;

/// Sinusoidal features of the diffusion time: `[sin(2πft), cos(2πft)]` for
/// four octave-spaced frequencies.
fn t_features(t: f64) -> Mat {
    let mut data = Vec::with_capacity(T_FEATURES);
    for f in [1.0, 2.0, 4.0, 8.0] {
        let a = std::f64::consts::TAU * f * t;
        data.push(a.sin());
        data.push(a.cos());
    }
    Mat::from_vec(1, T_FEATURES, data)
}

// ---------------------------------------------------------------------------
// Modes and attention styles
// ---------------------------------------------------------------------------

/// Model configuration under test: the baseline, each efficiency mechanism
/// alone, all three combined, and each mechanism ablated from the
/// combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// No context tokens at all.
    NoCondition,
    /// Joint attention over the full `[noisy; context]` sequence.
    BaselineIcc,
    /// Token selection only.
    DtsOnly,
    /// Step-wise context caching only.
    StepCacheOnly,
    /// Layer-wise context skipping only.
    LayerCacheOnly,
    /// Selection + step caching + layer skipping.
    FullDit2,
    /// Combination without token selection.
    NoDts,
    /// Combination without step caching.
    NoStepCache,
    /// Combination without layer skipping.
    NoLayerCache,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::NoCondition,
        Mode::BaselineIcc,
        Mode::DtsOnly,
        Mode::StepCacheOnly,
        Mode::LayerCacheOnly,
        Mode::FullDit2,
        Mode::NoDts,
        Mode::NoStepCache,
        Mode::NoLayerCache,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NoCondition => "no_condition",
            Mode::BaselineIcc => "baseline_icc",
            Mode::DtsOnly => "dts_only",
            Mode::StepCacheOnly => "step_cache_only",
            Mode::LayerCacheOnly => "layer_cache_only",
            Mode::FullDit2 => "fulldit2",
            Mode::NoDts => "no_dts",
            Mode::NoStepCache => "no_step_cache",
            Mode::NoLayerCache => "no_layer_cache",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown mode {s:?}")))
    }

    /// Whether context tokens enter the sequence at all.
    pub fn uses_context(self) -> bool {
        self != Mode::NoCondition
    }

    /// Whether context tokens are scored and pruned per block.
    pub fn dts(self) -> bool {
        matches!(
            self,
            Mode::DtsOnly | Mode::FullDit2 | Mode::NoStepCache | Mode::NoLayerCache
        )
    }

    /// Whether context K/V are cached at step 0 and reused afterwards.
    pub fn step_cache(self) -> bool {
        matches!(
            self,
            Mode::StepCacheOnly | Mode::FullDit2 | Mode::NoDts | Mode::NoLayerCache
        )
    }

    /// Whether context processing is restricted to the active layer plan.
    pub fn layer_cache(self) -> bool {
        matches!(
            self,
            Mode::LayerCacheOnly | Mode::FullDit2 | Mode::NoDts | Mode::NoStepCache
        )
    }

    /// The attention style the mode's cost model assumes: joint attention
    /// for the baseline-like modes, the two-call decoupled split wherever
    /// step caching is in play (caching requires context rows that never
    /// look at noisy keys).
    pub fn canonical_style(self) -> AttentionStyle {
        if self.step_cache() || self == Mode::NoStepCache {
            AttentionStyle::Decoupled
        } else {
            AttentionStyle::Full
        }
    }
}

/// How one block's attention is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionStyle {
    /// One joint call over `[noisy; kept context]`.
    Full,
    /// Context self-attention plus noisy-to-all attention.
    Decoupled,
    /// Joint attention with the context→noisy score block masked out —
    /// mathematically equal to `Decoupled`, kept as a cross-check oracle.
    /// Not accepted in config files; tests construct it directly.
    MaskedOracle,
}

impl AttentionStyle {
    pub fn name(self) -> &'static str {
        match self {
            AttentionStyle::Full => "full",
            AttentionStyle::Decoupled => "decoupled",
            AttentionStyle::MaskedOracle => "masked_oracle",
        }
    }

    /// Parses the two configurable styles (the oracle is test-only).
    pub fn parse(s: &str) -> Result<AttentionStyle> {
        match s {
            "full" => Ok(AttentionStyle::Full),
            "decoupled" => Ok(AttentionStyle::Decoupled),
            _ => Err(CoreError::Config(format!("unknown attention style {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_z: usize,
    /// Context segments as (name, token count), in sequence order.
    pub contexts: Vec<(String, usize)>,
    pub d_latent: usize,
    /// Fraction of context tokens kept by selection, in (0, 1].
    pub ratio: f64,
    pub scorer_hidden: usize,
    /// Layers that process context when layer skipping is on.
    pub plan: LayerPlan,
    pub mode: Mode,
    /// Attention style override; `None` uses the mode's canonical style.
    pub style: Option<AttentionStyle>,
    /// Multiply kept context values by sigmoid(score) so the scorer gets a
    /// gradient. Disable to make selection at ratio 1 a bit-exact identity.
    pub soft_gate: bool,
    /// Per-row learned positions on context tokens (off: context rows carry
    /// only their segment-type embedding and are permutation-symmetric).
    pub context_positions: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough for exhaustive testing.
    pub fn desk_default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            n_z: 16,
            contexts: vec![("ref".into(), 16), ("traj".into(), 16)],
            d_latent: 8,
            ratio: 0.5,
            scorer_hidden: 16,
            plan: LayerPlan::new(vec![0, 2], 4).expect("static plan"),
            mode: Mode::FullDit2,
            style: None,
            soft_gate: true,
            context_positions: false,
        }
    }

    pub fn n_c(&self) -> usize {
        self.contexts.iter().map(|(_, n)| n).sum()
    }

    pub fn layout(&self) -> Result<SequenceLayout> {
        SequenceLayout::new(self.n_z, self.contexts.clone())
    }

    /// The attention style actually in effect.
    pub fn attention_style(&self) -> AttentionStyle {
        self.style.unwrap_or_else(|| self.mode.canonical_style())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(CoreError::Config("layers must be ≥ 1".into()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 || self.d_latent == 0 || self.scorer_hidden == 0 {
            return Err(CoreError::Config(
                "d_ff, d_latent, scorer_hidden must be ≥ 1".into(),
            ));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(CoreError::Config(format!(
                "selection ratio must be in (0, 1], got {}",
                self.ratio
            )));
        }
        self.layout()?;
        if self.plan.total() != self.layers {
            return Err(CoreError::Config(format!(
                "layer plan covers {} layers, model has {}",
                self.plan.total(),
                self.layers
            )));
        }
        if self.mode.step_cache() && self.attention_style() == AttentionStyle::Full {
            return Err(CoreError::Config(format!(
                "mode {} caches context K/V and requires the decoupled attention split",
                self.mode.name()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm1: Tensor,
    pub norm2: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub t_proj: Tensor,
    /// Per-layer scorer. Present on every layer (not just active ones) so
    /// checkpoints stay loadable when the layer plan changes.
    pub scorer: ImportanceScorer,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Shared latent→model projection for noisy and context tokens.
    pub input_proj: Tensor,
    pub type_noisy: Tensor,
    /// One type embedding per context segment.
    pub type_ctx: Vec<Tensor>,
    pub pos_noisy: Tensor,
    /// Per-row context positions; applied only when the config enables them
    /// but always present so checkpoints are portable across that flag.
    pub pos_ctx: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Tensor,
    pub output_proj: Tensor,
}

fn ones(cols: usize) -> Tensor {
    Tensor::from_fn(vec![1, cols], |_| 1.0).expect("finite")
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let sd = 1.0 / (d as f64).sqrt();
        // Residual-branch outputs start small so early training is smooth;
        // embeddings start at roughly a third of the unit-variance token
        // signal so position/type information is visible to attention from
        // the first step.
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                wq: rng.normal_tensor(vec![d, d], sd),
                wk: rng.normal_tensor(vec![d, d], sd),
                wv: rng.normal_tensor(vec![d, d], sd),
                wo: rng.normal_tensor(vec![d, d], 0.25 * sd),
                norm1: ones(d),
                norm2: ones(d),
                ffn_w1: rng.normal_tensor(vec![d, cfg.d_ff], sd),
                ffn_b1: Tensor::zeros(vec![1, cfg.d_ff]),
                ffn_w2: rng.normal_tensor(vec![cfg.d_ff, d], 0.25 / (cfg.d_ff as f64).sqrt()),
                ffn_b2: Tensor::zeros(vec![1, d]),
                t_proj: rng.normal_tensor(vec![T_FEATURES, d], 1.0 / (T_FEATURES as f64).sqrt()),
                scorer: ImportanceScorer::init(d, cfg.scorer_hidden, rng),
            })
            .collect();
        ModelParams {
            input_proj: rng.normal_tensor(vec![cfg.d_latent, d], 1.0 / (cfg.d_latent as f64).sqrt()),
            type_noisy: rng.normal_tensor(vec![1, d], 0.3),
            type_ctx: cfg
                .contexts
                .iter()
                .map(|_| rng.normal_tensor(vec![1, d], 0.3))
                .collect(),
            pos_noisy: rng.normal_tensor(vec![cfg.n_z, d], 0.3),
            pos_ctx: rng.normal_tensor(vec![cfg.n_c(), d], 0.3),
            blocks,
            final_norm: ones(d),
            output_proj: rng.normal_tensor(vec![d, cfg.d_latent], sd),
        }
    }

    /// Stable (name, tensor) listing; the checkpoint format and gradient
    /// maps use exactly this order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("input_proj".into(), &self.input_proj),
            ("type_noisy".into(), &self.type_noisy),
        ];
        for (i, t) in self.type_ctx.iter().enumerate() {
            out.push((format!("type_ctx.{i}"), t));
        }
        out.push(("pos_noisy".into(), &self.pos_noisy));
        out.push(("pos_ctx".into(), &self.pos_ctx));
        for (b, bp) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{b}.wq"), &bp.wq));
            out.push((format!("blocks.{b}.wk"), &bp.wk));
            out.push((format!("blocks.{b}.wv"), &bp.wv));
            out.push((format!("blocks.{b}.wo"), &bp.wo));
            out.push((format!("blocks.{b}.norm1"), &bp.norm1));
            out.push((format!("blocks.{b}.norm2"), &bp.norm2));
            out.push((format!("blocks.{b}.ffn_w1"), &bp.ffn_w1));
            out.push((format!("blocks.{b}.ffn_b1"), &bp.ffn_b1));
            out.push((format!("blocks.{b}.ffn_w2"), &bp.ffn_w2));
            out.push((format!("blocks.{b}.ffn_b2"), &bp.ffn_b2));
            out.push((format!("blocks.{b}.t_proj"), &bp.t_proj));
            out.push((format!("blocks.{b}.scorer.w1"), &bp.scorer.w1));
            out.push((format!("blocks.{b}.scorer.b1"), &bp.scorer.b1));
            out.push((format!("blocks.{b}.scorer.w2"), &bp.scorer.w2));
            out.push((format!("blocks.{b}.scorer.b2"), &bp.scorer.b2));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("output_proj".into(), &self.output_proj));
        out
    }

    /// Mutable variant of [`ModelParams::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("input_proj".into(), &mut self.input_proj),
            ("type_noisy".into(), &mut self.type_noisy),
        ];
        for (i, t) in self.type_ctx.iter_mut().enumerate() {
            out.push((format!("type_ctx.{i}"), t));
        }
        out.push(("pos_noisy".into(), &mut self.pos_noisy));
        out.push(("pos_ctx".into(), &mut self.pos_ctx));
        for (b, bp) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{b}.wq"), &mut bp.wq));
            out.push((format!("blocks.{b}.wk"), &mut bp.wk));
            out.push((format!("blocks.{b}.wv"), &mut bp.wv));
            out.push((format!("blocks.{b}.wo"), &mut bp.wo));
            out.push((format!("blocks.{b}.norm1"), &mut bp.norm1));
            out.push((format!("blocks.{b}.norm2"), &mut bp.norm2));
            out.push((format!("blocks.{b}.ffn_w1"), &mut bp.ffn_w1));
            out.push((format!("blocks.{b}.ffn_b1"), &mut bp.ffn_b1));
            out.push((format!("blocks.{b}.ffn_w2"), &mut bp.ffn_w2));
            out.push((format!("blocks.{b}.ffn_b2"), &mut bp.ffn_b2));
            out.push((format!("blocks.{b}.t_proj"), &mut bp.t_proj));
            out.push((format!("blocks.{b}.scorer.w1"), &mut bp.scorer.w1));
            out.push((format!("blocks.{b}.scorer.b1"), &mut bp.scorer.b1));
            out.push((format!("blocks.{b}.scorer.w2"), &mut bp.scorer.w2));
            out.push((format!("blocks.{b}.scorer.b2"), &mut bp.scorer.b2));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("output_proj".into(), &mut self.output_proj));
        out
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn validate_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        fn want(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
            if t.shape() != shape {
                return Err(CoreError::Shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        }
        let d = cfg.d_model;
        want("input_proj", &self.input_proj, &[cfg.d_latent, d])?;
        want("type_noisy", &self.type_noisy, &[1, d])?;
        if self.type_ctx.len() != cfg.contexts.len() {
            return Err(CoreError::Shape(format!(
                "{} segment type embeddings for {} segments",
                self.type_ctx.len(),
                cfg.contexts.len()
            )));
        }
        for (i, t) in self.type_ctx.iter().enumerate() {
            want(&format!("type_ctx.{i}"), t, &[1, d])?;
        }
        want("pos_noisy", &self.pos_noisy, &[cfg.n_z, d])?;
        want("pos_ctx", &self.pos_ctx, &[cfg.n_c(), d])?;
        if self.blocks.len() != cfg.layers {
            return Err(CoreError::Shape(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                cfg.layers
            )));
        }
        for (b, bp) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{b}.{n}");
            want(&p("wq"), &bp.wq, &[d, d])?;
            want(&p("wk"), &bp.wk, &[d, d])?;
            want(&p("wv"), &bp.wv, &[d, d])?;
            want(&p("wo"), &bp.wo, &[d, d])?;
            want(&p("norm1"), &bp.norm1, &[1, d])?;
            want(&p("norm2"), &bp.norm2, &[1, d])?;
            want(&p("ffn_w1"), &bp.ffn_w1, &[d, cfg.d_ff])?;
            want(&p("ffn_b1"), &bp.ffn_b1, &[1, cfg.d_ff])?;
            want(&p("ffn_w2"), &bp.ffn_w2, &[cfg.d_ff, d])?;
            want(&p("ffn_b2"), &bp.ffn_b2, &[1, d])?;
            want(&p("t_proj"), &bp.t_proj, &[T_FEATURES, d])?;
            want(&p("scorer.w1"), &bp.scorer.w1, &[d + 1, cfg.scorer_hidden])?;
            want(&p("scorer.b1"), &bp.scorer.b1, &[1, cfg.scorer_hidden])?;
            want(&p("scorer.w2"), &bp.scorer.w2, &[cfg.scorer_hidden, 1])?;
            want(&p("scorer.b2"), &bp.scorer.b2, &[1, 1])?;
        }
        want("final_norm", &self.final_norm, &[1, d])?;
        want("output_proj", &self.output_proj, &[d, cfg.d_latent])?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Diffusion state
// ---------------------------------------------------------------------------

/// One model input: partially denoised latents at time `t` plus the raw
/// context segments (latent width, same projection as the noisy tokens).
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub z_t: Tensor,
    pub t: f64,
    pub contexts: Vec<Tensor>,
}

impl DiffusionState {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) {
            return Err(CoreError::Invalid(format!("t must be in [0,1], got {}", self.t)));
        }
        let (r, c) = self.z_t.dims2()?;
        if r != cfg.n_z || c != cfg.d_latent {
            return Err(CoreError::Shape(format!(
                "z_t is {r}×{c}, config wants {}×{}",
                cfg.n_z, cfg.d_latent
            )));
        }
        if self.contexts.len() != cfg.contexts.len() {
            return Err(CoreError::Shape(format!(
                "{} context segments supplied, config declares {}",
                self.contexts.len(),
                cfg.contexts.len()
            )));
        }
        for (seg, (name, len)) in self.contexts.iter().zip(&cfg.contexts) {
            let (sr, sc) = seg.dims2()?;
            if sr != *len || sc != cfg.d_latent {
                return Err(CoreError::Shape(format!(
                    "segment {name:?} is {sr}×{sc}, config wants {len}×{}",
                    cfg.d_latent
                )));
            }
        }
        Ok(())
    }

    /// Standard-normal latents and contexts at time `t` (probe inputs).
    pub fn synthetic(cfg: &ModelConfig, t: f64, rng: &mut Rng) -> Self {
        DiffusionState {
            z_t: rng.normal_tensor(vec![cfg.n_z, cfg.d_latent], 1.0),
            t,
            contexts: cfg
                .contexts
                .iter()
                .map(|(_, n)| rng.normal_tensor(vec![*n, cfg.d_latent], 1.0))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward machinery
// ---------------------------------------------------------------------------

/// Q/K/V snapshot of one layer's attention inputs, captured by a probe run
/// through the joint-attention baseline (keep-all selection, no gate).
#[derive(Debug, Clone)]
pub struct LayerQkv {
    pub q_z: Tensor,
    pub k_z: Tensor,
    pub v_z: Tensor,
    pub k_c: Tensor,
    pub v_c: Tensor,
}

pub(crate) struct ProbeSink {
    pub layer: usize,
    pub want_qkv: bool,
    pub want_mass: bool,
    pub qkv: Option<LayerQkv>,
    /// Per context token: attention mass received from noisy rows, summed
    /// over heads and noisy rows (captured under the full joint style).
    pub mass: Option<Vec<f64>>,
}

/// Everything one forward pass reads and writes besides the tape.
pub(crate) struct FwdCtx {
    pub train: bool,
    pub step: usize,
    pub cache: Option<SessionCache>,
    pub counter: InteractionCounter,
    pub probe: Option<ProbeSink>,
    pub trace_layer: Option<usize>,
    /// (noisy rows, context rows) after `trace_layer`, f32 snapshots.
    pub trace: Option<(Tensor, Tensor)>,
}

impl FwdCtx {
    pub fn train_phase() -> Self {
        FwdCtx {
            train: true,
            step: 0,
            cache: None,
            counter: InteractionCounter::default(),
            probe: None,
            trace_layer: None,
            trace: None,
        }
    }

    pub fn infer(step: usize) -> Self {
        FwdCtx {
            train: false,
            ..FwdCtx::train_phase()
        }
        .with_step(step)
    }

    fn with_step(mut self, step: usize) -> Self {
        self.step = step;
        self
    }
}

#[derive(Clone, Copy)]
struct BlockVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    norm1: Var,
    norm2: Var,
    ffn_w1: Var,
    ffn_b1: Var,
    ffn_w2: Var,
    ffn_b2: Var,
    t_proj: Var,
    s_w1: Var,
    s_b1: Var,
    s_w2: Var,
    s_b2: Var,
}

struct ParamVars {
    input_proj: Var,
    type_noisy: Var,
    type_ctx: Vec<Var>,
    pos_noisy: Var,
    pos_ctx: Var,
    blocks: Vec<BlockVars>,
    final_norm: Var,
    output_proj: Var,
}

impl ParamVars {
    /// Same names and order as [`ModelParams::named`].
    fn named(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = vec![
            ("input_proj".into(), self.input_proj),
            ("type_noisy".into(), self.type_noisy),
        ];
        for (i, &v) in self.type_ctx.iter().enumerate() {
            out.push((format!("type_ctx.{i}"), v));
        }
        out.push(("pos_noisy".into(), self.pos_noisy));
        out.push(("pos_ctx".into(), self.pos_ctx));
        for (b, bv) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{b}.wq"), bv.wq));
            out.push((format!("blocks.{b}.wk"), bv.wk));
            out.push((format!("blocks.{b}.wv"), bv.wv));
            out.push((format!("blocks.{b}.wo"), bv.wo));
            out.push((format!("blocks.{b}.norm1"), bv.norm1));
            out.push((format!("blocks.{b}.norm2"), bv.norm2));
            out.push((format!("blocks.{b}.ffn_w1"), bv.ffn_w1));
            out.push((format!("blocks.{b}.ffn_b1"), bv.ffn_b1));
            out.push((format!("blocks.{b}.ffn_w2"), bv.ffn_w2));
            out.push((format!("blocks.{b}.ffn_b2"), bv.ffn_b2));
            out.push((format!("blocks.{b}.t_proj"), bv.t_proj));
            out.push((format!("blocks.{b}.scorer.w1"), bv.s_w1));
            out.push((format!("blocks.{b}.scorer.b1"), bv.s_b1));
            out.push((format!("blocks.{b}.scorer.w2"), bv.s_w2));
            out.push((format!("blocks.{b}.scorer.b2"), bv.s_b2));
        }
        out.push(("final_norm".into(), self.final_norm));
        out.push(("output_proj".into(), self.output_proj));
        out
    }
}

fn register(tape: &mut Tape, p: &ModelParams) -> ParamVars {
    let mut leaf = |t: &Tensor| tape.leaf(Mat::from_tensor(t));
    ParamVars {
        input_proj: leaf(&p.input_proj),
        type_noisy: leaf(&p.type_noisy),
        type_ctx: p.type_ctx.iter().map(&mut leaf).collect(),
        pos_noisy: leaf(&p.pos_noisy),
        pos_ctx: leaf(&p.pos_ctx),
        blocks: p
            .blocks
            .iter()
            .map(|bp| BlockVars {
                wq: leaf(&bp.wq),
                wk: leaf(&bp.wk),
                wv: leaf(&bp.wv),
                wo: leaf(&bp.wo),
                norm1: leaf(&bp.norm1),
                norm2: leaf(&bp.norm2),
                ffn_w1: leaf(&bp.ffn_w1),
                ffn_b1: leaf(&bp.ffn_b1),
                ffn_w2: leaf(&bp.ffn_w2),
                ffn_b2: leaf(&bp.ffn_b2),
                t_proj: leaf(&bp.t_proj),
                s_w1: leaf(&bp.scorer.w1),
                s_b1: leaf(&bp.scorer.b1),
                s_w2: leaf(&bp.scorer.w2),
                s_b2: leaf(&bp.scorer.b2),
            })
            .collect(),
        final_norm: leaf(&p.final_norm),
        output_proj: leaf(&p.output_proj),
    }
}

/// Projection matmul with FLOP accounting (2·m·k·n, kept separate from the
/// attention interaction count).
fn proj(tape: &mut Tape, ctr: &mut InteractionCounter, x: Var, w: Var) -> Var {
    let (m, k) = {
        let v = tape.value(x);
        (v.rows, v.cols)
    };
    let n = tape.value(w).cols;
    ctr.record_matmul(m, k, n);
    tape.matmul(x, w)
}

/// Multi-head attention on the tape. Records `m·n` interaction units once
/// for the whole call (heads split the feature axis, not the token pairs).
/// Returns the output and the per-head softmax weight nodes.
fn mha(
    tape: &mut Tape,
    ctr: &mut InteractionCounter,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Mat>,
) -> (Var, Vec<Var>) {
    let d = tape.value(q).cols;
    debug_assert!(heads > 0 && d % heads == 0);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    ctr.record_attention(tape.value(q).rows, tape.value(k).rows);
    let mask_var = mask.map(|m| tape.leaf(m));
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let s = tape.matmul_nt(qh, kh);
        let mut s = tape.scale(s, scale);
        if let Some(mv) = mask_var {
            s = tape.add(s, mv);
        }
        let a = tape.softmax_rows(s);
        weights.push(a);
        outs.push(tape.matmul(a, vh));
    }
    (tape.concat_cols(&outs), weights)
}

/// Additive mask that removes context→noisy attention: rows are the k
/// context queries, columns the n_z noisy keys.
fn mask_ctx_to_noisy(n_z: usize, k: usize) -> Mat {
    let n = n_z + k;
    let mut m = Mat::zeros(n, n);
    for i in n_z..n {
        for j in 0..n_z {
            *m.at_mut(i, j) = MASK_NEG as f64;
        }
    }
    m
}

fn ffn(tape: &mut Tape, ctr: &mut InteractionCounter, x: Var, bv: BlockVars) -> Var {
    let h = proj(tape, ctr, x, bv.ffn_w1);
    let h = tape.add_row(h, bv.ffn_b1);
    let h = tape.gelu(h);
    let o = proj(tape, ctr, h, bv.ffn_w2);
    tape.add_row(o, bv.ffn_b2)
}

/// Noisy-only block for layers that bypass context (or models without it).
fn self_block(
    cfg: &ModelConfig,
    tape: &mut Tape,
    fc: &mut FwdCtx,
    bv: BlockVars,
    layer: usize,
    h_z: Var,
) -> Var {
    let u = tape.rms_norm(h_z, bv.norm1);
    let q = proj(tape, &mut fc.counter, u, bv.wq);
    let k = proj(tape, &mut fc.counter, u, bv.wk);
    let v = proj(tape, &mut fc.counter, u, bv.wv);
    if let Some(p) = fc.probe.as_mut() {
        if p.layer == layer && p.want_qkv {
            p.qkv = Some(LayerQkv {
                q_z: tape.value(q).to_tensor(),
                k_z: tape.value(k).to_tensor(),
                v_z: tape.value(v).to_tensor(),
                k_c: Tensor::zeros(vec![0, cfg.d_model]),
                v_c: Tensor::zeros(vec![0, cfg.d_model]),
            });
        }
    }
    let (o, _) = mha(tape, &mut fc.counter, q, k, v, cfg.heads, None);
    let op = proj(tape, &mut fc.counter, o, bv.wo);
    let h1 = tape.add(h_z, op);
    let m = tape.rms_norm(h1, bv.norm2);
    let f = ffn(tape, &mut fc.counter, m, bv);
    tape.add(h1, f)
}

/// Full block over noisy plus context rows: selection, attention in the
/// configured style, joint residual/FFN over the processed rows, then the
/// bypassed context rows merged back in original order. Populates the step
/// cache at step 0 when the mode caches.
#[allow(clippy::too_many_arguments)]
fn full_block(
    cfg: &ModelConfig,
    tape: &mut Tape,
    fc: &mut FwdCtx,
    bv: BlockVars,
    layer: usize,
    h_z: Var,
    h_c: Var,
) -> Result<(Var, Var)> {
    let n_z = tape.value(h_z).rows;
    let n_c = tape.value(h_c).rows;
    let d = cfg.d_model;

    let u_z = tape.rms_norm(h_z, bv.norm1);
    let u_c = tape.rms_norm(h_c, bv.norm1);
    let q_z = proj(tape, &mut fc.counter, u_z, bv.wq);
    let k_z = proj(tape, &mut fc.counter, u_z, bv.wk);
    let v_z = proj(tape, &mut fc.counter, u_z, bv.wv);
    // Values for every context row: selection scores are a function of them.
    let v_c_full = proj(tape, &mut fc.counter, u_c, bv.wv);

    let dts = cfg.mode.dts();
    let (sel, score_var) = if dts {
        let feats = tape.row_l2_append(v_c_full);
        let s = proj(tape, &mut fc.counter, feats, bv.s_w1);
        let s = tape.add_row(s, bv.s_b1);
        let s = tape.gelu(s);
        let o = proj(tape, &mut fc.counter, s, bv.s_w2);
        let o = tape.add_row(o, bv.s_b2);
        let scores = tape.value(o).to_tensor();
        (select_topk(&scores, cfg.ratio)?, Some(o))
    } else {
        (SelectionResult::keep_all(n_c), None)
    };
    let kept = sel.kept.clone();
    let k = kept.len();

    // Projections for kept rows only; skipped rows never produce Q or K.
    let u_sel = tape.gather_rows(u_c, kept.clone());
    let q_sel = proj(tape, &mut fc.counter, u_sel, bv.wq);
    let mut k_sel = proj(tape, &mut fc.counter, u_sel, bv.wk);
    let mut v_sel = tape.gather_rows(v_c_full, kept.clone());
    if dts && cfg.soft_gate {
        let s_kept = tape.gather_rows(score_var.expect("scores exist when dts"), kept.clone());
        let gate = tape.sigmoid(s_kept);
        v_sel = tape.mul_rows(v_sel, gate);
    }
    if !fc.train {
        // Inference rounds the cache-class tensors to f32 so a cached read
        // and a recomputation agree bit-for-bit.
        k_sel = tape.snap(k_sel);
        v_sel = tape.snap(v_sel);
    }

    if let Some(p) = fc.probe.as_mut() {
        if p.layer == layer && p.want_qkv {
            p.qkv = Some(LayerQkv {
                q_z: tape.value(q_z).to_tensor(),
                k_z: tape.value(k_z).to_tensor(),
                v_z: tape.value(v_z).to_tensor(),
                k_c: tape.value(k_sel).to_tensor(),
                v_c: tape.value(v_sel).to_tensor(),
            });
        }
    }

    let style = cfg.attention_style();
    let (o_z, o_c) = match style {
        AttentionStyle::Full | AttentionStyle::MaskedOracle => {
            let q = tape.concat_rows(&[q_z, q_sel]);
            let kk = tape.concat_rows(&[k_z, k_sel]);
            let vv = tape.concat_rows(&[v_z, v_sel]);
            let mask = (style == AttentionStyle::MaskedOracle && k > 0)
                .then(|| mask_ctx_to_noisy(n_z, k));
            let (o, weights) = mha(tape, &mut fc.counter, q, kk, vv, cfg.heads, mask);
            if let Some(p) = fc.probe.as_mut() {
                if p.layer == layer && p.want_mass && style == AttentionStyle::Full {
                    let mut mass = vec![0.0; k];
                    for &wv in &weights {
                        let w = tape.value(wv);
                        for i in 0..n_z {
                            for (j, slot) in mass.iter_mut().enumerate() {
                                *slot += w.at(i, n_z + j);
                            }
                        }
                    }
                    p.mass = Some(mass);
                }
            }
            (tape.slice_rows(o, 0, n_z), tape.slice_rows(o, n_z, k))
        }
        AttentionStyle::Decoupled => {
            let o_c = if k > 0 {
                let (o, _) = mha(tape, &mut fc.counter, q_sel, k_sel, v_sel, cfg.heads, None);
                o
            } else {
                tape.leaf(Mat::zeros(0, d))
            };
            let k_all = tape.concat_rows(&[k_z, k_sel]);
            let v_all = tape.concat_rows(&[v_z, v_sel]);
            let (o_z, _) = mha(tape, &mut fc.counter, q_z, k_all, v_all, cfg.heads, None);
            (o_z, o_c)
        }
    };

    // Residual and FFN over the processed rows only (noisy + kept context).
    let h_sel = tape.gather_rows(h_c, kept.clone());
    let h_in = tape.concat_rows(&[h_z, h_sel]);
    let o_all = tape.concat_rows(&[o_z, o_c]);
    let o_proj = proj(tape, &mut fc.counter, o_all, bv.wo);
    let h_mid = tape.add(h_in, o_proj);
    let normed = tape.rms_norm(h_mid, bv.norm2);
    let f = ffn(tape, &mut fc.counter, normed, bv);
    let h_out = tape.add(h_mid, f);

    let new_h_z = tape.slice_rows(h_out, 0, n_z);
    let mut ctx_processed = tape.slice_rows(h_out, n_z, k);
    if !fc.train {
        ctx_processed = tape.snap(ctx_processed);
    }

    // Skipped rows bypass everything: merged back bit-identical.
    let new_h_c = if sel.skipped.is_empty() {
        ctx_processed
    } else {
        let skipped_rows = tape.gather_rows(h_c, sel.skipped.clone());
        let both = tape.concat_rows(&[ctx_processed, skipped_rows]);
        let mut perm = vec![0usize; n_c];
        for (r, &tok) in sel.kept.iter().enumerate() {
            perm[tok] = r;
        }
        for (r, &tok) in sel.skipped.iter().enumerate() {
            perm[tok] = k + r;
        }
        tape.gather_rows(both, perm)
    };

    if !fc.train && cfg.mode.step_cache() && fc.step == 0 {
        let entry = CacheEntry {
            k: tape.value(k_sel).to_tensor(),
            v: tape.value(v_sel).to_tensor(),
            sel: sel.clone(),
            step: fc.step,
            ctx_out: tape.value(new_h_c).to_tensor(),
        };
        if let Some(cache) = fc.cache.as_mut() {
            cache.populate(layer, entry)?;
        }
    }
    Ok((new_h_z, new_h_c))
}

/// Cached-step block: context K/V and the layer's context output come from
/// the step cache; only the noisy rows are computed.
fn cached_block(
    cfg: &ModelConfig,
    tape: &mut Tape,
    fc: &mut FwdCtx,
    bv: BlockVars,
    layer: usize,
    h_z: Var,
) -> Result<(Var, Var)> {
    let (k_t, v_t, ctx_out) = {
        let cache = fc
            .cache
            .as_ref()
            .ok_or_else(|| CoreError::Protocol("cached step without a session cache".into()))?;
        let e = cache.lookup(layer)?;
        (e.k.clone(), e.v.clone(), e.ctx_out.clone())
    };
    let u_z = tape.rms_norm(h_z, bv.norm1);
    let q_z = proj(tape, &mut fc.counter, u_z, bv.wq);
    let k_z = proj(tape, &mut fc.counter, u_z, bv.wk);
    let v_z = proj(tape, &mut fc.counter, u_z, bv.wv);
    let k_sel = tape.leaf(Mat::from_tensor(&k_t));
    let v_sel = tape.leaf(Mat::from_tensor(&v_t));
    let k_all = tape.concat_rows(&[k_z, k_sel]);
    let v_all = tape.concat_rows(&[v_z, v_sel]);
    let (o_z, _) = mha(tape, &mut fc.counter, q_z, k_all, v_all, cfg.heads, None);
    let o_proj = proj(tape, &mut fc.counter, o_z, bv.wo);
    let h_mid = tape.add(h_z, o_proj);
    let normed = tape.rms_norm(h_mid, bv.norm2);
    let f = ffn(tape, &mut fc.counter, normed, bv);
    let new_h_z = tape.add(h_mid, f);
    let new_h_c = tape.leaf(Mat::from_tensor(&ctx_out));
    Ok((new_h_z, new_h_c))
}

/// Whole-model forward pass; returns the velocity node and the registered
/// parameter variables (for gradient extraction).
fn forward(
    model: &Model,
    tape: &mut Tape,
    state: &DiffusionState,
    fc: &mut FwdCtx,
) -> Result<(Var, ParamVars)> {
    let cfg = &model.cfg;
    state.validate(cfg)?;
    let vars = register(tape, &model.params);
    let d = cfg.d_model;
    let use_ctx = cfg.mode.uses_context() && cfg.n_c() > 0;

    // Sequence assembly: shared input projection, type embeddings, noisy
    // positions (context rows carry per-row positions only if enabled).
    let z_leaf = tape.leaf(Mat::from_tensor(&state.z_t));
    let mut h_z = proj(tape, &mut fc.counter, z_leaf, vars.input_proj);
    h_z = tape.add_row(h_z, vars.type_noisy);
    h_z = tape.add(h_z, vars.pos_noisy);

    let mut h_c = if use_ctx {
        let mut parts = Vec::with_capacity(state.contexts.len());
        for (i, seg) in state.contexts.iter().enumerate() {
            let leaf = tape.leaf(Mat::from_tensor(seg));
            let e = proj(tape, &mut fc.counter, leaf, vars.input_proj);
            parts.push(tape.add_row(e, vars.type_ctx[i]));
        }
        let mut cat = tape.concat_rows(&parts);
        if cfg.context_positions {
            cat = tape.add(cat, vars.pos_ctx);
        }
        if !fc.train {
            // f32 anchor for the step-invariant context pathway: every
            // context row entering layer 0 is exactly representable, so
            // cached f32 snapshots reproduce the uncached values bit-wise.
            cat = tape.snap(cat);
        }
        cat
    } else {
        tape.leaf(Mat::zeros(0, d))
    };

    for l in 0..cfg.layers {
        let bv = vars.blocks[l];
        let tf = tape.leaf(t_features(state.t));
        let tb = proj(tape, &mut fc.counter, tf, bv.t_proj);
        h_z = tape.add_row(h_z, tb);

        let ctx_here = use_ctx && (!cfg.mode.layer_cache() || cfg.plan.contains(l));
        if !ctx_here {
            h_z = self_block(cfg, tape, fc, bv, l, h_z);
        } else {
            let cached =
                !fc.train && cfg.mode.step_cache() && fc.step > 0 && fc.cache.is_some();
            let (nz, nc) = if cached {
                cached_block(cfg, tape, fc, bv, l, h_z)?
            } else {
                full_block(cfg, tape, fc, bv, l, h_z, h_c)?
            };
            h_z = nz;
            h_c = nc;
        }
        if fc.trace_layer == Some(l) {
            fc.trace = Some((tape.value(h_z).to_tensor(), tape.value(h_c).to_tensor()));
        }
    }
    let fin = tape.rms_norm(h_z, vars.final_norm);
    let vel = proj(tape, &mut fc.counter, fin, vars.output_proj);
    Ok((vel, vars))
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

/// Knobs for [`Model::sample_run`].
#[derive(Debug, Clone)]
pub struct SampleOptions {
    /// Honor the mode's step caching (off forces recomputation every step).
    pub use_cache: bool,
    /// Capture (noisy, context) hidden rows after this layer at every step.
    pub trace_layer: Option<usize>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            use_cache: true,
            trace_layer: None,
        }
    }
}

/// Hidden-state snapshot after the traced layer at one sampling step.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub step: usize,
    pub noisy: Tensor,
    pub ctx: Tensor,
}

/// Per-step instrumentation: how much work one Euler step cost.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: usize,
    /// Flow time the velocity was evaluated at.
    pub t: f64,
    pub attn_pairs: u64,
    pub proj_flops: u64,
    pub seconds: f64,
}

/// Result of one sampling run with instrumentation.
#[derive(Debug)]
pub struct SampleRun {
    pub latents: Tensor,
    pub counter: InteractionCounter,
    pub steps: Vec<StepStats>,
    pub traces: Vec<StepTrace>,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: ModelParams) -> Result<Model> {
        cfg.validate()?;
        params.validate_shapes(&cfg)?;
        Ok(Model { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let params = ModelParams::init(&cfg, &mut rng);
        Ok(Model { cfg, params })
    }

    /// Same parameters under a different mode (and optional style override).
    pub fn reconfigured(&self, mode: Mode, style: Option<AttentionStyle>) -> Result<Model> {
        let mut cfg = self.cfg.clone();
        cfg.mode = mode;
        cfg.style = style;
        Model::new(cfg, self.params.clone())
    }

    /// The embedded input sequence (noisy rows first, then context segments
    /// in declared order) and its layout. Mode-independent: this is the
    /// sequence a joint-attention forward starts from.
    pub fn assemble_sequence(&self, state: &DiffusionState) -> Result<(Tensor, SequenceLayout)> {
        state.validate(&self.cfg)?;
        let w_in = Mat::from_tensor(&self.params.input_proj);
        let embed = |seg: &Tensor, ty: &Tensor| -> Mat {
            let mut e = Mat::from_tensor(seg).matmul(&w_in);
            let t = Mat::from_tensor(ty);
            for i in 0..e.rows {
                for j in 0..e.cols {
                    *e.at_mut(i, j) += t.at(0, j);
                }
            }
            e
        };
        let mut h_z = embed(&state.z_t, &self.params.type_noisy);
        h_z = h_z.add(&Mat::from_tensor(&self.params.pos_noisy));
        let mut parts = vec![h_z];
        for (i, seg) in state.contexts.iter().enumerate() {
            parts.push(embed(seg, &self.params.type_ctx[i]));
        }
        let mut seq = Mat::concat_rows(&parts.iter().collect::<Vec<_>>());
        if self.cfg.context_positions && self.cfg.n_c() > 0 {
            let pos = Mat::from_tensor(&self.params.pos_ctx);
            for i in 0..self.cfg.n_c() {
                for j in 0..seq.cols {
                    *seq.at_mut(self.cfg.n_z + i, j) += pos.at(i, j);
                }
            }
        }
        Ok((seq.to_tensor(), self.cfg.layout()?))
    }

    /// Predicted velocity for one state (inference pathway, no cache).
    pub fn velocity(&self, state: &DiffusionState) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut fc = FwdCtx::infer(0);
        let (v, _) = forward(self, &mut tape, state, &mut fc)?;
        Ok(tape.value(v).to_tensor())
    }

    /// Flow-matching loss at an explicit (z0, t) draw: z_t = (1−t)z0 + t·z1,
    /// target velocity z1 − z0, mean squared error over the velocity output.
    pub fn fm_loss_at(&self, z1: &Tensor, contexts: &[Tensor], z0: &Tensor, t: f64) -> Result<f64> {
        self.fm_inner(z1, contexts, z0, t, false).map(|(l, _)| l)
    }

    /// Loss plus analytic gradients for every named parameter.
    pub fn fm_loss_grads_at(
        &self,
        z1: &Tensor,
        contexts: &[Tensor],
        z0: &Tensor,
        t: f64,
    ) -> Result<(f64, Vec<(String, Tensor)>)> {
        let (loss, grads) = self.fm_inner(z1, contexts, z0, t, true)?;
        let named = grads
            .expect("gradients requested")
            .into_iter()
            .map(|(n, g)| (n, g.to_tensor()))
            .collect();
        Ok((loss, named))
    }

    /// Flow-matching loss with z0 ~ standard normal and t ~ uniform[0,1)
    /// drawn from the rng.
    pub fn fm_loss(&self, z1: &Tensor, contexts: &[Tensor], rng: &mut Rng) -> Result<f64> {
        let z0 = rng.normal_tensor(vec![self.cfg.n_z, self.cfg.d_latent], 1.0);
        let t = rng.next_f64();
        self.fm_loss_at(z1, contexts, &z0, t)
    }

    fn fm_inner(
        &self,
        z1: &Tensor,
        contexts: &[Tensor],
        z0: &Tensor,
        t: f64,
        want_grads: bool,
    ) -> Result<(f64, Option<Vec<(String, Mat)>>)> {
        let (r1, c1) = z1.dims2()?;
        let (r0, c0) = z0.dims2()?;
        if (r1, c1) != (self.cfg.n_z, self.cfg.d_latent) || (r0, c0) != (r1, c1) {
            return Err(CoreError::Shape(format!(
                "z1 {r1}×{c1} / z0 {r0}×{c0}, config wants {}×{}",
                self.cfg.n_z, self.cfg.d_latent
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(CoreError::Invalid(format!("t must be in [0,1], got {t}")));
        }
        let m1 = Mat::from_tensor(z1);
        let m0 = Mat::from_tensor(z0);
        let z_t = m0.scale(1.0 - t).add(&m1.scale(t)).to_tensor();
        let target = m1.sub(&m0);
        let state = DiffusionState {
            z_t,
            t,
            contexts: contexts.to_vec(),
        };
        let mut tape = Tape::new();
        let mut fc = FwdCtx::train_phase();
        let (vel, vars) = forward(self, &mut tape, &state, &mut fc)?;
        let tgt = tape.leaf(target);
        let diff = tape.sub(vel, tgt);
        let loss_var = tape.mean_sq(diff);
        let loss = tape.value(loss_var).at(0, 0);
        if !want_grads {
            return Ok((loss, None));
        }
        let grads = tape.backward(loss_var);
        let named = vars
            .named()
            .into_iter()
            .map(|(n, v)| (n, grads[v].clone()))
            .collect();
        Ok((loss, Some(named)))
    }

    /// Euler sampler from z0 ~ normal at t=0 to t=1 in `steps` equal steps.
    pub fn sample(&self, contexts: &[Tensor], steps: usize, rng: &mut Rng) -> Result<Tensor> {
        Ok(self
            .sample_run(contexts, steps, rng, &SampleOptions::default())?
            .latents)
    }

    /// Sampler with instrumentation: interaction counts, optional per-step
    /// hidden-state traces, and a cache toggle for exactness comparisons.
    pub fn sample_run(
        &self,
        contexts: &[Tensor],
        steps: usize,
        rng: &mut Rng,
        opts: &SampleOptions,
    ) -> Result<SampleRun> {
        if steps == 0 {
            return Err(CoreError::Invalid("sampling needs at least one step".into()));
        }
        let cfg = &self.cfg;
        let mut z = rng.normal_tensor(vec![cfg.n_z, cfg.d_latent], 1.0);
        let mut cache = if opts.use_cache && cfg.mode.step_cache() {
            let cacheable: Vec<usize> = if cfg.mode.layer_cache() {
                cfg.plan.active().to_vec()
            } else {
                (0..cfg.layers).collect()
            };
            Some(SessionCache::new(cfg.layers, &cacheable)?)
        } else {
            None
        };
        let mut counter = InteractionCounter::default();
        let mut step_stats = Vec::with_capacity(steps);
        let mut traces = Vec::new();
        for step in 0..steps {
            let started = std::time::Instant::now();
            let t = step as f64 / steps as f64;
            let state = DiffusionState {
                z_t: z.clone(),
                t,
                contexts: contexts.to_vec(),
            };
            let mut fc = FwdCtx::infer(step);
            fc.cache = cache.take();
            fc.trace_layer = opts.trace_layer;
            let mut tape = Tape::new();
            let (vel, _) = forward(self, &mut tape, &state, &mut fc)?;
            let vel_m = tape.value(vel);
            // Euler update computed in f64 from the f32 state, rounded back.
            z = Mat::from_tensor(&z)
                .add(&vel_m.scale(1.0 / steps as f64))
                .to_tensor();
            cache = fc.cache.take();
            counter.add(&fc.counter);
            step_stats.push(StepStats {
                step,
                t,
                attn_pairs: fc.counter.attn_pairs,
                proj_flops: fc.counter.proj_flops,
                seconds: started.elapsed().as_secs_f64(),
            });
            if let Some((noisy, ctx)) = fc.trace.take() {
                traces.push(StepTrace { step, noisy, ctx });
            }
        }
        Ok(SampleRun {
            latents: z,
            counter,
            steps: step_stats,
            traces,
        })
    }

    /// Plain SGD on the flow-matching loss over task-generated batches.
    /// Returns the per-iteration mean batch loss.
    pub fn train_toy(
        &mut self,
        task: &crate::task::SyntheticTask,
        iters: usize,
        lr: f64,
        batch: usize,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if batch == 0 {
            return Err(CoreError::Invalid("batch must be ≥ 1".into()));
        }
        let mut losses = Vec::with_capacity(iters);
        let mut draw_idx = 0u64;
        for it in 0..iters {
            let mut acc: Option<Vec<Mat>> = None;
            let mut loss_sum = 0.0;
            for _ in 0..batch {
                let (z1, ctxs) = task.draw(&self.cfg, draw_idx)?;
                draw_idx += 1;
                let z0 = rng.normal_tensor(vec![self.cfg.n_z, self.cfg.d_latent], 1.0);
                let t = rng.next_f64();
                let (loss, grads) = self.fm_inner(&z1, &ctxs, &z0, t, true)?;
                loss_sum += loss;
                let grads = grads.expect("gradients requested");
                acc = Some(match acc {
                    None => grads.into_iter().map(|(_, g)| g).collect(),
                    Some(mut a) => {
                        for (slot, (_, g)) in a.iter_mut().zip(grads) {
                            *slot = slot.add(&g);
                        }
                        a
                    }
                });
            }
            let mean_loss = loss_sum / batch as f64;
            if !mean_loss.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite loss at iteration {it}"
                )));
            }
            losses.push(mean_loss);
            let grads = acc.expect("batch ≥ 1");
            let scale = lr / batch as f64;
            for ((name, p), g) in self.params.named_mut().into_iter().zip(&grads) {
                let (r, c) = p.dims2()?;
                let data: Vec<f32> = p
                    .data()
                    .iter()
                    .zip(&g.data)
                    .map(|(&pv, &gv)| (pv as f64 - scale * gv) as f32)
                    .collect();
                *p = Tensor::matrix(r, c, data).map_err(|_| {
                    CoreError::Diverged(format!("non-finite update for {name} at iteration {it}"))
                })?;
            }
        }
        Ok(losses)
    }

    /// Q/K/V of one layer under the joint-attention baseline (keep-all,
    /// no gate), regardless of the configured mode: the conditioning-pathway
    /// measurement used for layer importance.
    pub fn probe_layer_qkv(&self, state: &DiffusionState, layer: usize) -> Result<LayerQkv> {
        let sink = self.probe(state, layer, true, false)?;
        sink.qkv
            .ok_or_else(|| CoreError::Invalid(format!("layer {layer} captured no Q/K/V")))
    }

    /// Attention mass each context token receives from the noisy rows at
    /// one layer (summed over heads and noisy rows), probed through the
    /// joint-attention baseline.
    pub fn probe_ctx_mass(&self, state: &DiffusionState, layer: usize) -> Result<Vec<f64>> {
        let sink = self.probe(state, layer, false, true)?;
        sink.mass
            .ok_or_else(|| CoreError::Invalid(format!("layer {layer} captured no attention mass")))
    }

    fn probe(
        &self,
        state: &DiffusionState,
        layer: usize,
        want_qkv: bool,
        want_mass: bool,
    ) -> Result<ProbeSink> {
        if layer >= self.cfg.layers {
            return Err(CoreError::Invalid(format!(
                "probe layer {layer} out of range for {} layers",
                self.cfg.layers
            )));
        }
        let probe_model = self.reconfigured(Mode::BaselineIcc, Some(AttentionStyle::Full))?;
        let mut tape = Tape::new();
        let mut fc = FwdCtx::infer(0);
        fc.probe = Some(ProbeSink {
            layer,
            want_qkv,
            want_mass,
            qkv: None,
            mass: None,
        });
        forward(&probe_model, &mut tape, state, &mut fc)?;
        Ok(fc.probe.take().expect("probe sink survives the pass"))
    }
}

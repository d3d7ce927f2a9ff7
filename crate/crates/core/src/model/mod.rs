//! Patch-based transformer forecaster with learnable frequency filters.
//!
//! Every channel is forecast independently with shared weights:
//! RevIN, optional pre-embedding filters, patching and embedding,
//! `alpha` spectral blocks, `total_layers - alpha` attention blocks,
//! a flatten + linear head, and RevIN denormalization.

mod attention;
mod checkpoint;
mod patch;
mod revin;

pub use attention::{AttentionBlock, AttentionTrace};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use patch::{embed_patches, patch_count, patchify, PatchEmbedding};
pub use revin::{revin_denormalize, revin_normalize, RevIn, RevInState, REVIN_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, ForwardCtx, Linear};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::spectral::{pre_filter_param, BlockTrace, SpectralBlock, SpectralBlockConfig};

/// Where the learnable filters sit relative to the patch embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterPlacement {
    /// Spectral blocks act on embedded patches.
    #[default]
    PostEmbedding,
    /// Bare filters act on the normalized series right after RevIN.
    PreEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    /// Defaults to `patch_len` (non-overlapping patches).
    pub stride: Option<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    /// Defaults to `d_model / n_heads`.
    pub d_k: Option<usize>,
    /// Attention-block MLP width; defaults to `2 * d_model`.
    pub d_ff: Option<usize>,
    pub total_layers: usize,
    /// Number of spectral blocks; the rest are attention blocks.
    pub alpha: usize,
    pub spectral: SpectralBlockConfig,
    pub filter_placement: FilterPlacement,
    pub dropout: f64,
    pub activation: Activation,
    /// Channel count; only consulted for RevIN affine parameters.
    pub channels: usize,
    pub revin_affine: bool,
    pub positional_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            patch_len: 16,
            stride: None,
            d_model: 128,
            n_heads: 4,
            d_k: None,
            d_ff: None,
            total_layers: 4,
            alpha: 1,
            spectral: SpectralBlockConfig::default(),
            filter_placement: FilterPlacement::PostEmbedding,
            dropout: 0.1,
            activation: Activation::Gelu,
            channels: 1,
            revin_affine: false,
            positional_embedding: true,
        }
    }
}

impl ModelConfig {
    /// Smallest useful configuration, for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        Self {
            lookback: 16,
            horizon: 4,
            patch_len: 4,
            stride: None,
            d_model: 8,
            n_heads: 2,
            total_layers: 2,
            alpha: 1,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch_len)
    }

    pub fn d_k(&self) -> usize {
        self.d_k.unwrap_or(self.d_model / self.n_heads.max(1))
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(2 * self.d_model)
    }

    pub fn attention_layers(&self) -> usize {
        self.total_layers.saturating_sub(self.alpha)
    }

    pub fn patches(&self) -> Result<usize> {
        patch_count(self.lookback, self.patch_len, self.stride())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.alpha > self.total_layers {
            return fail(format!(
                "alpha = {} exceeds total_layers = {}",
                self.alpha, self.total_layers
            ));
        }
        if self.lookback < 2 {
            return fail(format!("lookback {} is too short", self.lookback));
        }
        if self.horizon == 0 || self.d_model == 0 || self.n_heads == 0 || self.channels == 0 {
            return fail("horizon, d_model, n_heads and channels must be positive".into());
        }
        if self.d_k.is_none() && !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model = {} is not divisible by n_heads = {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_k() == 0 || self.d_ff() == 0 {
            return fail("d_k and d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.patches()?;
        self.spectral.validate()
    }
}

/// Anything the trainer can fit: maps `[batch, channels, lookback]` to
/// `[batch, channels, horizon]`.
pub trait Forecaster: Send + Sync {
    fn lookback(&self) -> usize;
    fn horizon(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Result<Var>;

    /// Eval-mode forecast of `[channels, lookback]` or `[batch, channels, lookback]`.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let batched = match x.rank() {
            2 => x.reshape(&[1, x.shape()[0], x.shape()[1]])?,
            3 => x.clone(),
            _ => {
                return Err(Error::invalid(format!(
                    "expected [channels, lookback] or [batch, channels, lookback], got {:?}",
                    x.shape()
                )))
            }
        };
        let mut tape = Tape::new();
        let v = tape.constant(batched);
        let mut ctx = ForwardCtx::eval();
        let y = self.forward(&mut tape, v, &mut ctx)?;
        let out = tape.value(y).clone();
        if x.rank() == 2 {
            out.reshape(&out.shape()[1..])
        } else {
            Ok(out)
        }
    }
}

fn check_input(tape: &Tape, x: Var, lookback: usize) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != lookback {
        return Err(Error::ShapeMismatch {
            op: "forecaster input",
            lhs: s.to_vec(),
            rhs: vec![lookback],
        });
    }
    Ok((s[0], s[1]))
}

/// Flatten-and-project head: `[.., patches, d_model] -> [.., horizon]`.
#[derive(Clone, Debug)]
pub struct ForecastHead {
    pub linear: Linear,
}

impl ForecastHead {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        patches: usize,
        d_model: usize,
        horizon: usize,
    ) -> Self {
        Self {
            linear: Linear::new(store, seed, "head", patches * d_model, horizon, true),
        }
    }

    pub fn param_count(patches: usize, d_model: usize, horizon: usize) -> usize {
        Linear::param_count(patches * d_model, horizon, true)
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, z: Var) -> Result<Var> {
        let rank = tape.shape(z).len();
        if rank < 2 {
            return Err(Error::invalid("forecast head needs [.., patches, d_model]"));
        }
        let flat = tape.flatten(z, rank - 2)?;
        self.linear.forward(store, tape, flat)
    }
}

/// Applies a head to one channel's `[patches, d_model]` representation.
pub fn forecast_head(head: &ForecastHead, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let y = head.forward(store, &mut tape, v)?;
    Ok(tape.value(y).clone())
}

/// Record of one filter application, for spectrum analysis.
#[derive(Clone, Copy, Debug)]
pub struct FilterTrace {
    pub filter: ParamId,
    /// Input to the surrounding block (the embedding, or the normalized series).
    pub block_input: Var,
    /// What the filter itself was applied to; the filtered axis is last.
    pub filter_input: Var,
    pub filter_output: Var,
    /// Length of the filtered axis (and of the filter).
    pub axis_len: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: Var,
    pub filters: Vec<FilterTrace>,
    pub attention: Vec<AttentionTrace>,
}

/// The assembled forecaster.
#[derive(Clone, Debug)]
pub struct FilterFormer {
    cfg: ModelConfig,
    store: ParamStore,
    revin: RevIn,
    pre_filters: Vec<ParamId>,
    embedding: PatchEmbedding,
    spectral: Vec<SpectralBlock>,
    attention: Vec<AttentionBlock>,
    head: ForecastHead,
}

impl FilterFormer {
    /// Builds and initializes a model. Initial values depend only on `seed`
    /// and each parameter's name.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let patches = cfg.patches()?;
        let mut store = ParamStore::new();
        let revin = RevIn::new(&mut store, cfg.channels, cfg.revin_affine);
        let pre = cfg.filter_placement == FilterPlacement::PreEmbedding;
        let pre_filters = if pre {
            (0..cfg.alpha)
                .map(|i| {
                    pre_filter_param(&mut store, seed, &format!("prefilter.{i}"), cfg.lookback)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let embedding = PatchEmbedding::new(
            &mut store,
            seed,
            cfg.lookback,
            cfg.patch_len,
            cfg.stride(),
            cfg.d_model,
            cfg.positional_embedding,
        )?;
        let spectral = if pre {
            Vec::new()
        } else {
            (0..cfg.alpha)
                .map(|i| {
                    SpectralBlock::new(
                        &mut store,
                        seed,
                        &format!("spectral.{i}"),
                        &cfg.spectral,
                        patches,
                        cfg.d_model,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        };
        let attention = build_attention(&mut store, seed, &cfg);
        let head = ForecastHead::new(&mut store, seed, patches, cfg.d_model, cfg.horizon);
        Ok(Self {
            cfg,
            store,
            revin,
            pre_filters,
            embedding,
            spectral,
            attention,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn spectral_blocks(&self) -> &[SpectralBlock] {
        &self.spectral
    }

    pub fn attention_blocks(&self) -> &[AttentionBlock] {
        &self.attention
    }

    pub fn embedding(&self) -> &PatchEmbedding {
        &self.embedding
    }

    pub fn head(&self) -> &ForecastHead {
        &self.head
    }

    /// Every learnable filter, in application order.
    pub fn filter_ids(&self) -> Vec<ParamId> {
        if self.pre_filters.is_empty() {
            self.spectral.iter().map(|b| b.filter).collect()
        } else {
            self.pre_filters.clone()
        }
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardTrace> {
        let (batch, channels) = check_input(tape, x, self.cfg.lookback)?;
        let store = &self.store;
        let dropout = self.cfg.dropout;
        let mut filters = Vec::new();

        let (mut xn, state) = self.revin.normalize(store, tape, x)?;
        for &id in &self.pre_filters {
            let w = store.var(tape, id);
            let out = tape.circular_filter(xn, w)?;
            filters.push(FilterTrace {
                filter: id,
                block_input: xn,
                filter_input: xn,
                filter_output: out,
                axis_len: self.cfg.lookback,
            });
            xn = out;
        }
        let rows = tape.reshape(xn, &[batch * channels, self.cfg.lookback])?;
        let mut z = self.embedding.forward(store, tape, rows, dropout, ctx)?;
        for block in &self.spectral {
            let BlockTrace {
                input,
                filter_input,
                filtered,
                output,
            } = block.forward_traced(store, tape, z, dropout, ctx)?;
            filters.push(FilterTrace {
                filter: block.filter,
                block_input: input,
                filter_input,
                filter_output: filtered,
                axis_len: block.cfg.filtered_axis_length(block.patches, block.d_model),
            });
            z = output;
        }
        let mut attention = Vec::with_capacity(self.attention.len());
        for block in &self.attention {
            let t = block.forward_traced(store, tape, z, dropout, ctx)?;
            z = t.output;
            attention.push(t);
        }
        let y = self.head.forward(store, tape, z)?;
        let y = tape.reshape(y, &[batch, channels, self.cfg.horizon])?;
        let output = self.revin.denormalize(store, tape, y, &state)?;
        Ok(ForwardTrace {
            output,
            filters,
            attention,
        })
    }
}

fn build_attention(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) -> Vec<AttentionBlock> {
    (0..cfg.attention_layers())
        .map(|j| {
            AttentionBlock::new(
                store,
                seed,
                &format!("attn.{j}"),
                cfg.d_model,
                cfg.n_heads,
                cfg.d_k(),
                cfg.d_ff(),
                cfg.activation,
            )
        })
        .collect()
}

impl Forecaster for FilterFormer {
    fn lookback(&self) -> usize {
        self.cfg.lookback
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        Ok(self.forward_traced(tape, x, ctx)?.output)
    }
}

/// The attention-only patch transformer the filters are attached to.
///
/// Built from the same components and parameter names as [`FilterFormer`],
/// so a filter-free `FilterFormer` with the same seed must match it exactly.
#[derive(Clone, Debug)]
pub struct PatchBackbone {
    cfg: ModelConfig,
    store: ParamStore,
    revin: RevIn,
    embedding: PatchEmbedding,
    attention: Vec<AttentionBlock>,
    head: ForecastHead,
}

impl PatchBackbone {
    /// Uses `cfg` with `alpha` ignored: every layer is an attention block.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let cfg = ModelConfig { alpha: 0, ..cfg };
        cfg.validate()?;
        let patches = cfg.patches()?;
        let mut store = ParamStore::new();
        let revin = RevIn::new(&mut store, cfg.channels, cfg.revin_affine);
        let embedding = PatchEmbedding::new(
            &mut store,
            seed,
            cfg.lookback,
            cfg.patch_len,
            cfg.stride(),
            cfg.d_model,
            cfg.positional_embedding,
        )?;
        let attention = build_attention(&mut store, seed, &cfg);
        let head = ForecastHead::new(&mut store, seed, patches, cfg.d_model, cfg.horizon);
        Ok(Self {
            cfg,
            store,
            revin,
            embedding,
            attention,
            head,
        })
    }
}

impl Forecaster for PatchBackbone {
    fn lookback(&self) -> usize {
        self.cfg.lookback
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let (batch, channels) = check_input(tape, x, self.cfg.lookback)?;
        let store = &self.store;
        let (xn, state) = self.revin.normalize(store, tape, x)?;
        let rows = tape.reshape(xn, &[batch * channels, self.cfg.lookback])?;
        let mut z = self
            .embedding
            .forward(store, tape, rows, self.cfg.dropout, ctx)?;
        for block in &self.attention {
            z = block.forward(store, tape, z, self.cfg.dropout, ctx)?;
        }
        let y = self.head.forward(store, tape, z)?;
        let y = tape.reshape(y, &[batch, channels, self.cfg.horizon])?;
        self.revin.denormalize(store, tape, y, &state)
    }
}

/// Channel-shared linear map from lookback to horizon; a minimal baseline
/// for exercising the trainer.
#[derive(Clone, Debug)]
pub struct LinearForecaster {
    store: ParamStore,
    linear: Linear,
}

impl LinearForecaster {
    pub fn new(lookback: usize, horizon: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let linear = Linear::new(&mut store, seed, "linear", lookback, horizon, true);
        Self { store, linear }
    }
}

impl Forecaster for LinearForecaster {
    fn lookback(&self) -> usize {
        self.linear.fan_in
    }

    fn horizon(&self) -> usize {
        self.linear.fan_out
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, x: Var, _ctx: &mut ForwardCtx) -> Result<Var> {
        check_input(tape, x, self.linear.fan_in)?;
        self.linear.forward(&self.store, tape, x)
    }
}

/// Analytic trainable-parameter count with a per-component breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub components: Vec<(String, usize)>,
}

pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let patches = cfg.patches()?;
    let d = cfg.d_model;
    let pre = cfg.filter_placement == FilterPlacement::PreEmbedding;
    let mut components = vec![(
        "revin".to_string(),
        RevIn::param_count(cfg.channels, cfg.revin_affine),
    )];
    if pre {
        components.push(("pre_filters".into(), cfg.alpha * cfg.lookback));
    }
    components.push((
        "embedding".into(),
        PatchEmbedding::param_count(cfg.patch_len, patches, d, cfg.positional_embedding),
    ));
    if !pre {
        let block = &cfg.spectral;
        let filter = block.filtered_axis_length(patches, d);
        let norms =
            crate::layers::BatchNorm::param_count(d) + crate::layers::InstanceNorm::param_count(d);
        let mlp = block.param_count(patches, d) - filter - norms;
        components.push(("spectral.filters".into(), cfg.alpha * filter));
        components.push(("spectral.norms".into(), cfg.alpha * norms));
        components.push(("spectral.mlp".into(), cfg.alpha * mlp));
    }
    components.push((
        "attention".into(),
        cfg.attention_layers() * AttentionBlock::param_count(d, cfg.n_heads, cfg.d_k(), cfg.d_ff()),
    ));
    components.push((
        "head".into(),
        ForecastHead::param_count(patches, d, cfg.horizon),
    ));
    let total = components.iter().map(|(_, n)| n).sum();
    Ok(ParamCount { total, components })
}

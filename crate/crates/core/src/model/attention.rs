//! Multi-head self-attention block over patch tokens.
//!
//! Per head `h`: `Q = Y Wq_h`, `K = Y Wk_h` with `d_k` columns and
//! `V = Y Wv_h` with `d_model` columns; the head output is
//! `softmax(Q K^T / sqrt(d_k)) V`. Heads are concatenated and projected
//! back to `d_model`, followed by post-norm residual batch norm and a
//! residual MLP, each followed by batch norm.

use crate::error::{Error, Result};
use crate::layers::{Activation, BatchNorm, ForwardCtx, Linear, Mlp};
use crate::numeric::{ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_attn: BatchNorm,
    pub mlp: Mlp,
    pub norm_mlp: BatchNorm,
    pub heads: usize,
    pub d_k: usize,
    pub d_model: usize,
}

/// Intermediate values of one attention block pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// `[batch * heads, patches, patches]` attention weights.
    pub weights: Var,
    pub output: Var,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        d_model: usize,
        heads: usize,
        d_k: usize,
        d_ff: usize,
        activation: Activation,
    ) -> Self {
        Self {
            query: Linear::new(
                store,
                seed,
                &format!("{name}.wq"),
                d_model,
                heads * d_k,
                true,
            ),
            key: Linear::new(
                store,
                seed,
                &format!("{name}.wk"),
                d_model,
                heads * d_k,
                true,
            ),
            value: Linear::new(
                store,
                seed,
                &format!("{name}.wv"),
                d_model,
                heads * d_model,
                true,
            ),
            output: Linear::new(
                store,
                seed,
                &format!("{name}.wo"),
                heads * d_model,
                d_model,
                true,
            ),
            norm_attn: BatchNorm::new(store, &format!("{name}.bn_attn"), d_model),
            mlp: Mlp::new(
                store,
                seed,
                &format!("{name}.mlp"),
                d_model,
                d_ff,
                activation,
            ),
            norm_mlp: BatchNorm::new(store, &format!("{name}.bn_mlp"), d_model),
            heads,
            d_k,
            d_model,
        }
    }

    pub fn param_count(d_model: usize, heads: usize, d_k: usize, d_ff: usize) -> usize {
        2 * Linear::param_count(d_model, heads * d_k, true)
            + Linear::param_count(d_model, heads * d_model, true)
            + Linear::param_count(heads * d_model, d_model, true)
            + 2 * BatchNorm::param_count(d_model)
            + Mlp::param_count(d_model, d_ff)
    }

    /// Splits `[batch, patches, heads * width]` into `[batch * heads, patches, width]`.
    fn split_heads(&self, tape: &mut Tape, x: Var, width: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (batch, patches) = (s[0], s[1]);
        let x = tape.reshape(x, &[batch, patches, self.heads, width])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[batch * self.heads, patches, width])
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        y: Var,
        dropout: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        Ok(self.forward_traced(store, tape, y, dropout, ctx)?.output)
    }

    /// `y` is `[batch, patches, d_model]`.
    pub fn forward_traced(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        y: Var,
        dropout: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<AttentionTrace> {
        let shape = tape.shape(y).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "attention_block",
                lhs: shape,
                rhs: vec![self.d_model],
            });
        }
        let (batch, patches) = (shape[0], shape[1]);
        let q = self.query.forward(store, tape, y)?;
        let k = self.key.forward(store, tape, y)?;
        let v = self.value.forward(store, tape, y)?;
        let q = self.split_heads(tape, q, self.d_k)?;
        let k = self.split_heads(tape, k, self.d_k)?;
        let v = self.split_heads(tape, v, self.d_model)?;

        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (self.d_k as f64).sqrt());
        let weights = tape.softmax(scores);
        let attn = ctx.dropout(tape, weights, dropout)?;
        let heads_out = tape.batch_matmul(attn, v, false)?;

        let o = tape.reshape(heads_out, &[batch, self.heads, patches, self.d_model])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[batch, patches, self.heads * self.d_model])?;
        let o = self.output.forward(store, tape, o)?;
        let o = ctx.dropout(tape, o, dropout)?;

        let res = tape.add(y, o)?;
        let z = self.norm_attn.forward(store, tape, res, ctx)?;
        let h = self.mlp.forward(store, tape, z, dropout, ctx)?;
        let h = ctx.dropout(tape, h, dropout)?;
        let res = tape.add(z, h)?;
        let output = self.norm_mlp.forward(store, tape, res, ctx)?;
        Ok(AttentionTrace { weights, output })
    }
}

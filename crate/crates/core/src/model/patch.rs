use crate::error::{Error, Result};
use crate::layers::{normal, ForwardCtx, Linear};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

/// Number of patches of length `patch_len` taken every `stride` steps from `len` steps.
pub fn patch_count(len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::invalid("patch length and stride must be positive"));
    }
    if patch_len > len {
        return Err(Error::invalid(format!(
            "patch length {patch_len} exceeds sequence length {len}"
        )));
    }
    Ok((len - patch_len) / stride + 1)
}

/// Splits `x` into patches; patch `i` covers `[i*stride, i*stride + patch_len)`.
pub fn patchify(x: &[f64], patch_len: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    let n = patch_count(x.len(), patch_len, stride)?;
    Ok((0..n)
        .map(|i| x[i * stride..i * stride + patch_len].to_vec())
        .collect())
}

/// Linear patch projection plus a learnable positional table.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub projection: Linear,
    pub position: Option<ParamId>,
    pub patch_len: usize,
    pub stride: usize,
    pub patches: usize,
    pub d_model: usize,
}

impl PatchEmbedding {
    pub const POSITION_INIT_STD: f64 = 0.02;

    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        lookback: usize,
        patch_len: usize,
        stride: usize,
        d_model: usize,
        positional: bool,
    ) -> Result<Self> {
        let patches = patch_count(lookback, patch_len, stride)?;
        let projection = Linear::new(store, seed, "embed.proj", patch_len, d_model, false);
        let position = positional.then(|| {
            store.add_param(
                "embed.position",
                normal(
                    seed,
                    "embed.position",
                    &[patches, d_model],
                    Self::POSITION_INIT_STD,
                ),
            )
        });
        Ok(Self {
            projection,
            position,
            patch_len,
            stride,
            patches,
            d_model,
        })
    }

    pub fn param_count(
        patch_len: usize,
        patches: usize,
        d_model: usize,
        positional: bool,
    ) -> usize {
        patch_len * d_model + if positional { patches * d_model } else { 0 }
    }

    /// `[.., len] -> [.., patches, d_model]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        dropout: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let patches = tape.unfold(x, self.patch_len, self.stride)?;
        let y = self.embed(store, tape, patches)?;
        ctx.dropout(tape, y, dropout)
    }

    /// Projects already-cut patches `[.., patches, patch_len]`.
    pub fn embed(&self, store: &ParamStore, tape: &mut Tape, patches: Var) -> Result<Var> {
        let y = self.projection.forward(store, tape, patches)?;
        match self.position {
            Some(p) => {
                let p = store.var(tape, p);
                tape.add_broadcast(y, p)
            }
            None => Ok(y),
        }
    }
}

/// Embeds a single `[patches, patch_len]` matrix without dropout.
pub fn embed_patches(
    embedding: &PatchEmbedding,
    store: &ParamStore,
    patches: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(patches.clone());
    let y = embedding.embed(store, &mut tape, p)?;
    Ok(tape.value(y).clone())
}

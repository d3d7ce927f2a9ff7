//! Learnable frequency filters and the spectral gating block.
//!
//! A filter is a real weight vector `w`. Its transfer function is `dft(w)`,
//! and filtering a real row `y` returns `idft(dft(w) * dft(y))`, i.e. the
//! circular convolution `w * y`. Because both spectra are conjugate
//! symmetric, so is their product, and the inverse is real.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, BatchNorm, ForwardCtx, InstanceNorm, Mlp};
use crate::numeric::fft::{complex_dft, complex_idft};
use crate::numeric::{dft, ParamId, ParamStore, RealFft, Spectrum, Tape, Tensor, Var};

/// Standard deviation of the random part of a fresh filter.
pub const FILTER_INIT_STD: f64 = 0.02;

/// A real-parameter frequency filter.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFilter {
    weights: Vec<f64>,
}

impl SpectralFilter {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("filter of length zero"));
        }
        Ok(Self { weights })
    }

    /// `w ~ N(0, 0.02)` with 1 added to `w[0]`: close to the identity filter.
    pub fn near_identity(len: usize, seed: u64, name: &str) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("filter of length zero"));
        }
        let mut w = crate::layers::normal(seed, name, &[len], FILTER_INIT_STD).into_data();
        w[0] += 1.0;
        Self::new(w)
    }

    pub fn identity(len: usize) -> Result<Self> {
        let mut w = vec![0.0; len];
        if let Some(first) = w.first_mut() {
            *first = 1.0;
        }
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Transfer function `dft(w)`, recomputed on every call.
    pub fn transfer(&self) -> Spectrum {
        dft(&self.weights).expect("nonempty filter")
    }

    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        apply_filter(&self.weights, y)
    }

    pub fn amplitude_spectrum(&self) -> Vec<f64> {
        self.transfer().amplitudes()
    }
}

fn check_lengths(w: &[f64], y: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid("filter of length zero"));
    }
    if w.len() != y.len() {
        return Err(Error::invalid(format!(
            "filter length {} does not match input length {}",
            w.len(),
            y.len()
        )));
    }
    Ok(())
}

/// `idft(dft(w) * dft(y))`, the circular convolution of `w` and `y`.
pub fn apply_filter(w: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_lengths(w, y)?;
    let plan = RealFft::new(w.len())?;
    let mut transfer = vec![Complex64::new(0.0, 0.0); plan.bin_count()];
    let mut spec = transfer.clone();
    plan.forward_into(w, &mut transfer);
    plan.forward_into(y, &mut spec);
    for (s, t) in spec.iter_mut().zip(&transfer) {
        *s *= t;
    }
    let mut out = vec![0.0; y.len()];
    plan.inverse_into(&spec, &mut out);
    Ok(out)
}

/// Largest imaginary magnitude left after filtering `y` with full-length
/// complex transforms, i.e. before the imaginary part would be discarded.
pub fn filter_imag_residual(w: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(w, y)?;
    let to_c = |v: &[f64]| {
        v.iter()
            .map(|&x| Complex64::new(x, 0.0))
            .collect::<Vec<_>>()
    };
    let wf = complex_dft(&to_c(w));
    let yf = complex_dft(&to_c(y));
    let prod: Vec<Complex64> = wf.iter().zip(&yf).map(|(a, b)| a * b).collect();
    Ok(complex_idft(&prod)
        .iter()
        .map(|c| c.im.abs())
        .fold(0.0, f64::max))
}

/// Per-bin `|P_k|` of the filter's transfer function.
pub fn amplitude_spectrum(w: &[f64]) -> Result<Vec<f64>> {
    Ok(dft(w)?.amplitudes())
}

/// Mean per-bin amplitude over a set of equally long rows.
pub fn mean_amplitude_spectrum(rows: &[f64], len: usize) -> Result<Vec<f64>> {
    if len == 0 || !rows.len().is_multiple_of(len) || rows.is_empty() {
        return Err(Error::invalid(format!(
            "{} values do not split into rows of length {len}",
            rows.len()
        )));
    }
    let plan = RealFft::new(len)?;
    let mut acc = vec![0.0; plan.bin_count()];
    let mut spec = vec![Complex64::new(0.0, 0.0); plan.bin_count()];
    let count = rows.len() / len;
    for row in rows.chunks(len) {
        plan.forward_into(row, &mut spec);
        for (a, s) in acc.iter_mut().zip(&spec) {
            *a += s.norm();
        }
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(acc)
}

/// Writes `bin_index,amplitude` rows.
pub fn write_amplitude_csv(path: &Path, amplitudes: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["bin_index", "amplitude"])
        .map_err(|e| csv_err(path, e))?;
    for (k, a) in amplitudes.iter().enumerate() {
        w.write_record([k.to_string(), a.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Writes any `Write` sink of amplitudes in the same schema, used for stdout.
pub fn write_amplitudes<W: Write>(sink: W, amplitudes: &[f64]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["bin_index", "amplitude"])?;
    for (k, a) in amplitudes.iter().enumerate() {
        w.write_record([k.to_string(), a.to_string()])?;
    }
    w.flush()
}

/// Which axis of an embedded `[patches, d_model]` tensor the filter runs along.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterAxis {
    /// Along the embedding dimension of every patch (weights shared over patches).
    #[default]
    Embedding,
    /// Along the patch sequence, separately for every embedding feature.
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralBlockConfig {
    pub use_mlp: bool,
    /// Hidden width of the optional MLP; `None` means `2 * d_model`.
    pub mlp_hidden: Option<usize>,
    pub axis: FilterAxis,
    pub activation: Activation,
}

impl Default for SpectralBlockConfig {
    fn default() -> Self {
        Self {
            use_mlp: false,
            mlp_hidden: None,
            axis: FilterAxis::Embedding,
            activation: Activation::Gelu,
        }
    }
}

impl SpectralBlockConfig {
    pub fn hidden(&self, d_model: usize) -> usize {
        self.mlp_hidden.unwrap_or(2 * d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_mlp && self.mlp_hidden == Some(0) {
            return Err(Error::invalid(
                "spectral block MLP needs a hidden width >= 1",
            ));
        }
        Ok(())
    }

    /// Length of the filtered axis for embedded input of the given size.
    pub fn filtered_axis_length(&self, patches: usize, d_model: usize) -> usize {
        match self.axis {
            FilterAxis::Embedding => d_model,
            FilterAxis::Patch => patches,
        }
    }

    pub fn param_count(&self, patches: usize, d_model: usize) -> usize {
        let mut n = self.filtered_axis_length(patches, d_model)
            + BatchNorm::param_count(d_model)
            + InstanceNorm::param_count(d_model);
        if self.use_mlp {
            n += Mlp::param_count(d_model, self.hidden(d_model));
        }
        n
    }
}

/// Intermediate values of one spectral block pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub input: Var,
    /// What the filter sees, laid out so that the filtered axis is last.
    pub filter_input: Var,
    /// Filter output in the same layout as `filter_input`.
    pub filtered: Var,
    pub output: Var,
}

/// Batch norm, learnable filter, instance norm, and optional residual MLP.
#[derive(Clone, Debug)]
pub struct SpectralBlock {
    pub cfg: SpectralBlockConfig,
    pub filter: ParamId,
    pub batch_norm: BatchNorm,
    pub instance_norm: InstanceNorm,
    pub mlp: Option<Mlp>,
    pub d_model: usize,
    pub patches: usize,
}

impl SpectralBlock {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        cfg: &SpectralBlockConfig,
        patches: usize,
        d_model: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.filtered_axis_length(patches, d_model);
        let fname = format!("{name}.filter");
        let filter = SpectralFilter::near_identity(n, seed, &fname)?;
        let filter = store.add_param(&fname, Tensor::vector(filter.weights));
        let batch_norm = BatchNorm::new(store, &format!("{name}.bn"), d_model);
        let instance_norm = InstanceNorm::new(store, &format!("{name}.in"), d_model);
        let mlp = cfg.use_mlp.then(|| {
            Mlp::new(
                store,
                seed,
                &format!("{name}.mlp"),
                d_model,
                cfg.hidden(d_model),
                cfg.activation,
            )
        });
        Ok(Self {
            cfg: cfg.clone(),
            filter,
            batch_norm,
            instance_norm,
            mlp,
            d_model,
            patches,
        })
    }

    pub fn filter(&self, store: &ParamStore) -> SpectralFilter {
        SpectralFilter {
            weights: store.get(self.filter).data().to_vec(),
        }
    }

    /// Applies the block to `[.., patches, d_model]` input.
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

    pub fn forward_traced(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        y: Var,
        dropout: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<BlockTrace> {
        let shape = tape.shape(y).to_vec();
        let rank = shape.len();
        if rank < 2 || shape[rank - 1] != self.d_model || shape[rank - 2] != self.patches {
            return Err(Error::ShapeMismatch {
                op: "spectral_block",
                lhs: shape,
                rhs: vec![self.patches, self.d_model],
            });
        }
        let normed = self.batch_norm.forward(store, tape, y, ctx)?;
        let w = store.var(tape, self.filter);
        let (filter_input, filtered, restored) = match self.cfg.axis {
            FilterAxis::Embedding => {
                let f = tape.circular_filter(normed, w)?;
                (normed, f, f)
            }
            FilterAxis::Patch => {
                let t = tape.transpose(normed)?;
                let f = tape.circular_filter(t, w)?;
                (t, f, tape.transpose(f)?)
            }
        };
        let mut out = self.instance_norm.forward(store, tape, restored)?;
        if let Some(mlp) = &self.mlp {
            let h = mlp.forward(store, tape, out, dropout, ctx)?;
            let h = ctx.dropout(tape, h, dropout)?;
            out = tape.add(out, h)?;
        }
        Ok(BlockTrace {
            input: y,
            filter_input,
            filtered,
            output: out,
        })
    }
}

/// Forward pass of a single spectral block on a standalone `[patches, d_model]` tensor.
pub fn spectral_block_forward(
    block: &SpectralBlock,
    store: &ParamStore,
    y: &Tensor,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(y.clone());
    let out = block.forward(store, &mut tape, v, 0.0, ctx)?;
    Ok(tape.value(out).clone())
}

/// Fresh filter for a standalone sequence of length `len` (used before patching).
pub fn pre_filter_param(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    len: usize,
) -> Result<ParamId> {
    let f = SpectralFilter::near_identity(len, seed, name)?;
    Ok(store.add_param(name, Tensor::vector(f.weights)))
}

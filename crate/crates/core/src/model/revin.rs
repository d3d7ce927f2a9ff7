//! Reversible instance normalization.

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

/// Lower bound for stored standard deviations.
pub const REVIN_EPS: f64 = 1e-5;

/// Per-row statistics captured when normalizing, needed to invert it.
#[derive(Clone, Debug, PartialEq)]
pub struct RevInState {
    pub mean: Vec<f64>,
    /// Population standard deviation floored at [`REVIN_EPS`].
    pub std: Vec<f64>,
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(REVIN_EPS))
}

fn rows_of(shape: &[usize]) -> Result<(usize, usize)> {
    let len = *shape
        .last()
        .ok_or_else(|| Error::invalid("instance normalization of a scalar"))?;
    Ok((shape.iter().product::<usize>() / len.max(1), len))
}

/// Normalizes each channel (row of the last axis) of `x` to zero mean and unit variance.
pub fn revin_normalize(x: &Tensor) -> Result<(Tensor, RevInState)> {
    let (rows, len) = rows_of(x.shape())?;
    if len < 2 {
        return Err(Error::invalid(format!(
            "instance normalization needs at least 2 steps, got {len}"
        )));
    }
    let mut out = x.data().to_vec();
    let mut state = RevInState {
        mean: Vec::with_capacity(rows),
        std: Vec::with_capacity(rows),
    };
    for (i, row) in out.chunks_mut(len).enumerate() {
        let (m, s) = row_stats(row);
        if s <= REVIN_EPS {
            log::warn!("channel {i} has (near) zero variance; std floored at {REVIN_EPS}");
        }
        row.iter_mut().for_each(|v| *v = (*v - m) / s);
        state.mean.push(m);
        state.std.push(s);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, state))
}

/// Inverse of [`revin_normalize`] applied to a forecast.
pub fn revin_denormalize(y: &Tensor, state: &RevInState) -> Result<Tensor> {
    let (rows, len) = rows_of(y.shape())?;
    if rows != state.mean.len() {
        return Err(Error::invalid(format!(
            "forecast has {rows} channels but the normalization state has {}",
            state.mean.len()
        )));
    }
    let mut out = y.data().to_vec();
    for ((row, m), s) in out.chunks_mut(len).zip(&state.mean).zip(&state.std) {
        row.iter_mut().for_each(|v| *v = *v * s + m);
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// In-graph RevIN on `[batch, channels, len]` input, with optional
/// per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct RevIn {
    pub affine: Option<(ParamId, ParamId)>,
    pub channels: usize,
}

impl RevIn {
    pub fn new(store: &mut ParamStore, channels: usize, affine: bool) -> Self {
        let affine = affine.then(|| {
            (
                store.add_param("revin.weight", Tensor::full(&[channels, 1], 1.0)),
                store.add_param("revin.bias", Tensor::zeros(&[channels, 1])),
            )
        });
        Self { affine, channels }
    }

    pub fn param_count(channels: usize, affine: bool) -> usize {
        if affine {
            2 * channels
        } else {
            0
        }
    }

    fn stat_shape(shape: &[usize]) -> Vec<usize> {
        let mut s = shape.to_vec();
        *s.last_mut().unwrap() = 1;
        s
    }

    pub fn normalize(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
    ) -> Result<(Var, RevInState)> {
        let shape = tape.shape(x).to_vec();
        let (_, len) = rows_of(&shape)?;
        if len < 2 {
            return Err(Error::invalid(format!(
                "instance normalization needs at least 2 steps, got {len}"
            )));
        }
        let mut state = RevInState {
            mean: Vec::new(),
            std: Vec::new(),
        };
        for row in tape.data(x).chunks(len) {
            let (m, s) = row_stats(row);
            state.mean.push(m);
            state.std.push(s);
        }
        let stat_shape = Self::stat_shape(&shape);
        let neg_mean = tape.constant(Tensor::new(
            stat_shape.clone(),
            state.mean.iter().map(|m| -m).collect(),
        )?);
        let inv_std = tape.constant(Tensor::new(
            stat_shape,
            state.std.iter().map(|s| 1.0 / s).collect(),
        )?);
        let centered = tape.add_broadcast(x, neg_mean)?;
        let mut y = tape.mul_broadcast(centered, inv_std)?;
        if let Some((g, b)) = self.affine {
            let g = store.var(tape, g);
            let b = store.var(tape, b);
            y = tape.mul_broadcast(y, g)?;
            y = tape.add_broadcast(y, b)?;
        }
        Ok((y, state))
    }

    pub fn denormalize(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        y: Var,
        state: &RevInState,
    ) -> Result<Var> {
        let shape = tape.shape(y).to_vec();
        let (rows, _) = rows_of(&shape)?;
        if rows != state.mean.len() {
            return Err(Error::invalid(format!(
                "forecast has {rows} rows but the normalization state has {}",
                state.mean.len()
            )));
        }
        let mut y = y;
        if let Some((g, b)) = self.affine {
            let g = store.var(tape, g);
            let b = store.var(tape, b);
            let neg_b = tape.scale(b, -1.0);
            y = tape.add_broadcast(y, neg_b)?;
            // the small offset keeps the inverse finite if gamma is driven to zero
            let recip = tape.reciprocal(g, REVIN_EPS * REVIN_EPS);
            y = tape.mul_broadcast(y, recip)?;
        }
        let stat_shape = Self::stat_shape(&shape);
        let std = tape.constant(Tensor::new(stat_shape.clone(), state.std.clone())?);
        let mean = tape.constant(Tensor::new(stat_shape, state.mean.clone())?);
        let y = tape.mul_broadcast(y, std)?;
        tape.add_broadcast(y, mean)
    }
}

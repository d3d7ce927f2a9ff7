//! Adam, mini-batch training with early stopping, and evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WindowStream;
use crate::error::{Error, Result};
use crate::layers::{apply_stat_updates, ForwardCtx};
use crate::model::Forecaster;
use crate::numeric::{ParamStore, Tape, Tensor};
use crate::spectral::csv_err;
use crate::util::{stream_rng, thread_pool};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Learning rates tried by sweeps.
    pub lr_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 50,
            patience: 15,
            seed: 0,
            lr_grid: vec![1e-4, 5e-4, 1e-3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} is invalid",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid(
                "batch_size, max_epochs and patience must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

fn check_same(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if pred.numel() == 0 {
        return Err(Error::invalid("metric of empty tensors"));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(pred, target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / pred.numel() as f64)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(pred, target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(s / pred.numel() as f64)
}

/// Adam moments for every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |_| Vec::new();
        let n = store.len();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: (0..n).map(zeros).collect(),
            v: (0..n).map(zeros).collect(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }

    /// Applies one update using the gradients accumulated on `store`.
    /// Parameters without a gradient are treated as having a zero gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.trainable_ids().collect();
        for &id in &ids {
            if let Some(g) = store.get(id).grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for id in ids {
            let i = id.index();
            let t = store.get_mut(id);
            let n = t.numel();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != n {
                m.resize(n, 0.0);
                v.resize(n, 0.0);
            }
            let grad = t
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; n]);
            for (k, theta) in t.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, lr: f64) -> Result<()> {
    state.step(store, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub curve: Vec<EpochLoss>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Trains with Adam on shuffled mini-batches, stops after `patience` epochs
/// without a strict validation improvement, and restores the best epoch.
pub fn fit<M: Forecaster + ?Sized>(
    model: &mut M,
    train: &WindowStream,
    val: &WindowStream,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(
            "training needs nonempty train and validation streams",
        ));
    }
    let mut adam = AdamState::new(model.params());
    let mut shuffle_rng = stream_rng(cfg.seed, "train.shuffle");
    let mut dropout_rng = stream_rng(cfg.seed, "train.dropout");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut curve = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let store = model.params_mut();
            store.zero_grad();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let mut ctx = ForwardCtx::train(dropout_rng.clone());
            let pred = model.forward(&mut tape, xv, &mut ctx)?;
            let loss = tape.mse_loss(pred, yv)?;
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
            tape.backward(loss)?;
            dropout_rng = ctx.rng;
            let store = model.params_mut();
            store.accumulate_grads(&tape)?;
            adam.step(store, cfg.lr)?;
            apply_stat_updates(store, &ctx.stat_updates);
        }
        let train_mse = loss_sum / train.len() as f64;
        let val_mse = evaluate(&*model, val, cfg.batch_size)?.mse;
        if !val_mse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                value: val_mse,
            });
        }
        log::info!("epoch {epoch}: train {train_mse:.6e}, val {val_mse:.6e}");
        curve.push(EpochLoss {
            epoch,
            train_mse,
            val_mse,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_mse < *b) {
            best = Some((epoch, val_mse, model.params().clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_mse, store) = best.expect("at least one epoch");
    *model.params_mut() = store;
    model.params_mut().zero_grad();
    Ok(FitReport {
        epochs_run: curve.len(),
        curve,
        best_epoch,
        best_val_mse,
        stopped_early,
    })
}

/// Eval-mode MSE and MAE over every window of `stream`. Batches run in
/// parallel; partial sums are reduced in batch order.
pub fn evaluate<M: Forecaster + ?Sized>(
    model: &M,
    stream: &WindowStream,
    batch_size: usize,
) -> Result<Metrics> {
    if stream.is_empty() {
        return Err(Error::invalid(format!("{} stream is empty", stream.name())));
    }
    let batch_size = batch_size.max(1);
    let starts: Vec<usize> = (0..stream.len()).step_by(batch_size).collect();
    let partials: Vec<Result<(f64, f64, usize)>> = thread_pool().install(|| {
        starts
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + batch_size).min(stream.len())).collect();
                let (x, y) = stream.batch(&idx)?;
                let pred = model.predict(&x)?;
                check_same(&pred, &y)?;
                let (mut sq, mut ab) = (0.0, 0.0);
                for (p, t) in pred.data().iter().zip(y.data()) {
                    sq += (p - t) * (p - t);
                    ab += (p - t).abs();
                }
                Ok((sq, ab, pred.numel()))
            })
            .collect()
    });
    let (mut sq, mut ab, mut n) = (0.0, 0.0, 0usize);
    for p in partials {
        let (s, a, k) = p?;
        sq += s;
        ab += a;
        n += k;
    }
    Ok(Metrics {
        mse: sq / n as f64,
        mae: ab / n as f64,
    })
}

/// Writes `epoch,train_mse,val_mse`.
pub fn write_loss_curve(path: &Path, curve: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "train_mse", "val_mse"])
        .map_err(|e| csv_err(path, e))?;
    for e in curve {
        w.write_record([
            e.epoch.to_string(),
            format!("{:e}", e.train_mse),
            format!("{:e}", e.val_mse),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `horizon,mse,mae`, one row per horizon.
pub fn write_metrics(path: &Path, rows: &[(usize, Metrics)]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("horizon,mse,mae\n");
    for (h, m) in rows {
        out.push_str(&format!("{h},{:e},{:e}\n", m.mse, m.mae));
    }
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

//! Trainable building blocks shared by the spectral and attention blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::util::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Biased batch variance together with the number of rows it was taken over.
    pub batch_var: Vec<f64>,
    pub rows: usize,
    pub momentum: f64,
}

/// Per-pass state: train/eval mode, dropout randomness, and pending
/// running-statistic updates (applied by the trainer after the step).
pub struct ForwardCtx {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub stat_updates: Vec<StatUpdate>,
}

impl ForwardCtx {
    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            mode: Mode::Train,
            rng,
            stat_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: stream_rng(0, "eval"),
            stat_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        if self.is_train() {
            tape.dropout(x, p, &mut self.rng)
        } else {
            Ok(x)
        }
    }
}

/// Folds recorded batch statistics into the running estimates.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        let unbias = if u.rows > 1 {
            u.rows as f64 / (u.rows - 1) as f64
        } else {
            1.0
        };
        let m = u.momentum;
        for (r, b) in store
            .get_mut(u.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .get_mut(u.running_var)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_var)
        {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

pub fn xavier_uniform(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let mut rng = stream_rng(seed, name);
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

pub fn normal(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = stream_rng(seed, name);
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| dist.sample(&mut rng)).collect(),
    )
    .expect("consistent shape")
}

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let wname = format!("{name}.weight");
        let weight = store.add_param(&wname, xavier_uniform(seed, &wname, fan_in, fan_out));
        let bias =
            bias.then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = store.var(tape, b);
                tape.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-feature scale and shift over the last axis.
#[derive(Clone, Debug)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_param(&format!("{name}.weight"), Tensor::full(&[dim], 1.0)),
            beta: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = store.var(tape, self.gamma);
        let b = store.var(tape, self.beta);
        let y = tape.mul_broadcast(x, g)?;
        tape.add_broadcast(y, b)
    }
}

/// Batch normalization over every leading position, one statistic per feature.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub affine: Affine,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
    pub dim: usize,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let affine = Affine::new(store, name, dim);
        let running_mean = store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[dim]));
        let running_var =
            store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[dim], 1.0));
        Self {
            affine,
            running_mean,
            running_var,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
            dim,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.dim) {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![self.dim],
            });
        }
        let normalized = if ctx.is_train() {
            let rows = tape.value(x).numel() / self.dim;
            let (y, mean, var) = tape.normalize_cols(x, self.eps)?;
            ctx.stat_updates.push(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                batch_mean: mean,
                batch_var: var,
                rows,
                momentum: self.momentum,
            });
            y
        } else {
            let mean = store.get(self.running_mean).data();
            let var = store.get(self.running_var).data();
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            let shift: Vec<f64> = mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
            let inv = tape.constant(Tensor::vector(inv));
            let shift = tape.constant(Tensor::vector(shift));
            let y = tape.mul_broadcast(x, inv)?;
            tape.add_broadcast(y, shift)?
        };
        self.affine.forward(store, tape, normalized)
    }
}

/// Normalization of each last-axis row to zero mean and unit variance, with affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub affine: Affine,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            affine: Affine::new(store, name, dim),
            eps: 1e-5,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.normalize_rows(x, self.eps);
        self.affine.forward(store, tape, y)
    }
}

/// Two-layer perceptron `dim -> hidden -> dim`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
    ) -> Self {
        Self {
            fc1: Linear::new(store, seed, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, seed, &format!("{name}.fc2"), hidden, dim, true),
            activation,
        }
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden, true) + Linear::param_count(hidden, dim, true)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        dropout: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let h = self.fc1.forward(store, tape, x)?;
        let h = self.activation.apply(tape, h);
        let h = ctx.dropout(tape, h, dropout)?;
        self.fc2.forward(store, tape, h)
    }
}

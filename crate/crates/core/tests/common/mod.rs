#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct O(n^2) summation of X_k = sum_t x_t e^{-2 pi i k t / n}, k = 0..=n/2.
pub fn naive_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| {
                    let ang = -std::f64::consts::TAU * (k * t % n) as f64 / n as f64;
                    Complex64::from_polar(v, ang)
                })
                .sum()
        })
        .collect()
}

/// O(n^2) circular convolution (w * y)_t = sum_s w_s y_{(t - s) mod n}.
pub fn circular_convolution(w: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|t| (0..n).map(|s| w[s] * y[(t + n - s) % n]).sum())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

use spectral_forecaster::layers::ForwardCtx;
use spectral_forecaster::numeric::{ParamStore, Tape, Tensor, Var};
use spectral_forecaster::Result;

/// Finite-difference tolerance for component and model checks.
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-4;

pub struct StoreCheck {
    pub max_error: f64,
    pub worst: String,
    pub checked: usize,
}

fn weighted_loss(tape: &mut Tape, out: Var) -> Var {
    let n = tape.value(out).numel();
    let mut r = rng(n as u64 + 7);
    let w = Tensor::new(tape.shape(out).to_vec(), random_vec(&mut r, n)).unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn loss_value<F>(store: &ParamStore, forward: &F) -> f64
where
    F: Fn(&ParamStore, &mut Tape, &mut ForwardCtx) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::train(rng(0));
    let out = forward(store, &mut tape, &mut ctx).unwrap();
    let loss = weighted_loss(&mut tape, out);
    tape.value(loss).data()[0]
}

/// Central differences over every trainable scalar of `store`, compared with
/// the tape's parameter gradients of a random weighted sum of the output.
pub fn store_gradcheck<F>(store: &ParamStore, forward: F) -> StoreCheck
where
    F: Fn(&ParamStore, &mut Tape, &mut ForwardCtx) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::train(rng(0));
    let out = forward(store, &mut tape, &mut ctx).unwrap();
    let loss = weighted_loss(&mut tape, out);
    tape.backward(loss).unwrap();
    let mut analytic: Vec<Vec<f64>> = store
        .entries()
        .iter()
        .map(|e| vec![0.0; e.value.numel()])
        .collect();
    for (id, g) in tape.param_grads() {
        for (a, b) in analytic[id.index()].iter_mut().zip(g) {
            *a += b;
        }
    }

    let floor = ABS_FLOOR / REL_TOL;
    let mut probe = store.clone();
    let mut report = StoreCheck {
        max_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for id in store.trainable_ids() {
        for (e, &a) in analytic[id.index()].iter().enumerate() {
            let orig = store.get(id).data()[e];
            probe.get_mut(id).data_mut()[e] = orig + STEP;
            let plus = loss_value(&probe, &forward);
            probe.get_mut(id).data_mut()[e] = orig - STEP;
            let minus = loss_value(&probe, &forward);
            probe.get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_error || report.worst.is_empty() {
                report.max_error = report.max_error.max(err);
                report.worst = format!("{}[{e}]: analytic {a}, numeric {numeric}", store.name(id));
            }
        }
    }
    report
}

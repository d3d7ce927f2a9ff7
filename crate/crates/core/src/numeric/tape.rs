//! Dynamic reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass. Every op appends a node holding its
//! output value and enough saved state to run its vector-Jacobian product.
//! Nodes are appended after their inputs, so walking the node list backwards
//! is a reverse topological order and each node is visited once.

use num_complex::Complex64;
use rand::Rng;

use super::fft::RealFft;
use super::params::ParamId;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation together with what its backward pass needs.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Unfold {
        input: Var,
        size: usize,
        step: usize,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Reciprocal(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    VarLast(Var),
    NormalizeRows {
        input: Var,
        inv_std: Vec<f64>,
    },
    NormalizeCols {
        input: Var,
        inv_std: Vec<f64>,
    },
    CircularFilter {
        input: Var,
        filter: Var,
    },
    MseLoss(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Row-major `C = beta*C + A*B` with explicit strides, via `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Maps each flat index of `big` to the flat index of a broadcast `small`.
struct Broadcast {
    suffix_len: Option<usize>,
    big_shape: Vec<usize>,
    small_strides: Vec<usize>,
}

impl Broadcast {
    fn new(big: &[usize], small: &[usize]) -> Option<Self> {
        if small.len() > big.len() {
            return None;
        }
        let offset = big.len() - small.len();
        if big[offset..] == *small {
            return Some(Self {
                suffix_len: Some(small.iter().product::<usize>().max(1)),
                big_shape: big.to_vec(),
                small_strides: Vec::new(),
            });
        }
        let mut strides = vec![0; big.len()];
        let mut acc = 1;
        for i in (0..small.len()).rev() {
            let d = small[i];
            let bd = big[offset + i];
            if d == bd {
                strides[offset + i] = acc;
            } else if d != 1 {
                return None;
            }
            acc *= d;
        }
        Some(Self {
            suffix_len: None,
            big_shape: big.to_vec(),
            small_strides: strides,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.big_shape.iter().product();
        if let Some(len) = self.suffix_len {
            for i in 0..total {
                f(i, i % len);
            }
            return;
        }
        let rank = self.big_shape.len();
        let mut idx = vec![0usize; rank];
        let mut j = 0usize;
        for i in 0..total {
            f(i, j);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                j += self.small_strides[ax];
                if idx[ax] < self.big_shape[ax] {
                    break;
                }
                j -= self.small_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn grad_slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn output(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let t = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a trainable parameter; its gradient is reported by [`Tape::param_grads`].
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        let v = self.leaf(t.clone().with_requires_grad(true));
        self.params.push((id, v));
        v
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.output(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b` broadcasts into `a`'s shape (right-aligned, dims equal or 1).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new(self.shape(a), self.shape(b))
            .ok_or_else(|| mismatch("add_broadcast", self.shape(a), self.shape(b)))?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; da.len()];
        bc.for_each(|i, j| out[i] = da[i] + db[j]);
        let t = self.output(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::AddBroadcast(a, b), &[a, b]))
    }

    /// `a * b` where `b` broadcasts into `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new(self.shape(a), self.shape(b))
            .ok_or_else(|| mismatch("mul_broadcast", self.shape(a), self.shape(b)))?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; da.len()];
        bc.for_each(|i, j| out[i] = da[i] * db[j]);
        let t = self.output(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::MulBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let t = self.output(self.shape(a).to_vec(), data);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// `a[.., k] x b[k, n] -> [.., n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            (k, 1),
            self.data(b),
            (n, 1),
            0.0,
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let t = self.output(shape, out);
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let bstr = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                bstr,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = self.output(vec![batch, m, n], out);
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(mismatch("permute", &shape, axes));
        }
        for &ax in axes {
            if std::mem::replace(&mut seen[ax], true) {
                return Err(mismatch("permute", &shape, axes));
            }
        }
        let (data, out_shape) = permute_data(self.data(a), &shape, axes);
        let t = self.output(out_shape, data);
        Ok(self.push(t, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::invalid(format!(
                "transpose needs rank >= 2, got shape {:?}",
                self.shape(a)
            )));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Collapses axes `start..` into one.
    pub fn flatten(&mut self, a: Var, start: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if start >= shape.len() {
            return Err(Error::invalid(format!(
                "flatten from axis {start} of shape {shape:?}"
            )));
        }
        let mut new_shape = shape[..start].to_vec();
        new_shape.push(shape[start..].iter().product());
        self.reshape(a, &new_shape)
    }

    /// Sliding windows over the last axis: `[.., len] -> [.., count, size]`.
    pub fn unfold(&mut self, a: Var, size: usize, step: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let len = last_dim(&shape);
        if shape.is_empty() || size == 0 || step == 0 || size > len {
            return Err(Error::invalid(format!(
                "cannot cut windows of size {size}, step {step} from shape {shape:?}"
            )));
        }
        let count = (len - size) / step + 1;
        let rows = self.value(a).numel() / len;
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows * count * size);
        for r in 0..rows {
            let row = &src[r * len..(r + 1) * len];
            for i in 0..count {
                out.extend_from_slice(&row[i * step..i * step + size]);
            }
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.extend([count, size]);
        let t = self.output(out_shape, out);
        Ok(self.push(
            t,
            Op::Unfold {
                input: a,
                size,
                step,
            },
            &[a],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = last_dim(&shape);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = self.output(shape, out);
        self.push(t, Op::Softmax(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| gelu(x)).collect();
        let t = self.output(self.shape(a).to_vec(), data);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let t = self.output(self.shape(a).to_vec(), data);
        self.push(t, Op::Relu(a), &[a])
    }

    /// Elementwise `1 / (a + offset)`.
    pub fn reciprocal(&mut self, a: Var, offset: f64) -> Var {
        let data = self.data(a).iter().map(|&x| 1.0 / (x + offset)).collect();
        let t = self.output(self.shape(a).to_vec(), data);
        self.push(t, Op::Reciprocal(a, offset), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over the last axis, which is dropped.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = last_dim(&shape);
        let data = self
            .data(a)
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        let t = self.output(shape[..shape.len().saturating_sub(1)].to_vec(), data);
        self.push(t, Op::MeanLast(a), &[a])
    }

    /// Population variance over the last axis, which is dropped.
    pub fn var_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = last_dim(&shape);
        let data = self
            .data(a)
            .chunks(n)
            .map(|r| {
                let m = r.iter().sum::<f64>() / n as f64;
                r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64
            })
            .collect();
        let t = self.output(shape[..shape.len().saturating_sub(1)].to_vec(), data);
        self.push(t, Op::VarLast(a), &[a])
    }

    /// Zero-mean, unit-variance over the last axis (no affine).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let n = last_dim(&shape);
        let mut out = self.data(a).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_mut(n) {
            let m = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - m) * inv;
            }
            inv_std.push(inv);
        }
        let t = self.output(shape, out);
        self.push(t, Op::NormalizeRows { input: a, inv_std }, &[a])
    }

    /// Normalizes each column of a `[rows, cols]` view using statistics over rows.
    ///
    /// Returns the normalized values with the per-column batch mean and
    /// (biased) variance so callers can maintain running estimates.
    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(a).to_vec();
        let cols = last_dim(&shape);
        let total = self.value(a).numel();
        let rows = total / cols.max(1);
        if rows == 0 {
            return Err(Error::invalid("batch statistics over zero rows"));
        }
        let src = self.data(a);
        let mut mean = vec![0.0; cols];
        for row in src.chunks(cols) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for row in src.chunks(cols) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = src.to_vec();
        for row in out.chunks_mut(cols) {
            for c in 0..cols {
                row[c] = (row[c] - mean[c]) * inv_std[c];
            }
        }
        let t = self.output(shape, out);
        let v = self.push(t, Op::NormalizeCols { input: a, inv_std }, &[a]);
        Ok((v, mean, var))
    }

    /// Circular convolution of every last-axis row of `input` with `filter`,
    /// computed as `idft(dft(filter) * dft(row))`.
    pub fn circular_filter(&mut self, input: Var, filter: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let n = last_dim(&shape);
        if self.shape(filter) != [n] {
            return Err(mismatch("circular_filter", &shape, self.shape(filter)));
        }
        let plan = RealFft::new(n)?;
        let bins = plan.bin_count();
        let mut transfer = vec![Complex64::new(0.0, 0.0); bins];
        plan.forward_into(self.data(filter), &mut transfer);
        let mut out = vec![0.0; self.value(input).numel()];
        let mut spec = vec![Complex64::new(0.0, 0.0); bins];
        for (src, dst) in self.data(input).chunks(n).zip(out.chunks_mut(n)) {
            plan.forward_into(src, &mut spec);
            for (s, w) in spec.iter_mut().zip(&transfer) {
                *s *= w;
            }
            plan.inverse_into(&spec, dst);
        }
        let t = self.output(shape, out);
        Ok(self.push(t, Op::CircularFilter { input, filter }, &[input, filter]))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.binary_same("mse_loss", pred, target)?;
        let (p, t) = (self.data(pred), self.data(target));
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        Ok(self.push(
            Tensor::scalar(s),
            Op::MseLoss(pred, target),
            &[pred, target],
        ))
    }

    /// Inverted dropout with drop probability `p`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::invalid(format!(
                "dropout probability {p} must be < 1"
            )));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::new(self.shape(a).to_vec(), mask)?);
        self.mul(a, m)
    }

    /// Runs the reverse pass from a scalar `loss`. Allowed once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, zeros if unreached.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        self.grads
            .as_ref()
            .and_then(|g| g[v.0].clone())
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()])
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Vec<f64>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.grad(v)))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = acc!(*a) {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(db) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(da) {
                        *x += y * w;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(*b) {
                    let bc = Broadcast::new(nodes[a.0].value.shape(), nodes[b.0].value.shape())
                        .expect("checked in forward");
                    bc.for_each(|i, j| gb[j] += g[i]);
                }
            }
            Op::MulBroadcast(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let bc = Broadcast::new(nodes[a.0].value.shape(), nodes[b.0].value.shape())
                    .expect("checked in forward");
                if let Some(ga) = acc!(*a) {
                    bc.for_each(|i, j| ga[i] += g[i] * db[j]);
                }
                if let Some(gb) = acc!(*b) {
                    bc.for_each(|i, j| gb[j] += g[i] * da[i]);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::MatMul(a, b) => {
                let sb = nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let m = nodes[a.0].value.numel() / k.max(1);
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = acc!(*a) {
                    // dA += G B^T
                    gemm(m, n, k, g, (n, 1), db, (1, n), 1.0, ga);
                }
                if let Some(gb) = acc!(*b) {
                    // dB += A^T G
                    gemm(k, m, n, da, (1, k), g, (n, 1), 1.0, gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = acc!(*a) {
                    for bi in 0..batch {
                        let bs = &db[bi * k * n..(bi + 1) * k * n];
                        // dA_i += G_i B_eff^T, B_eff is k x n
                        let bt = if *trans_b { (k, 1) } else { (1, n) };
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            bs,
                            bt,
                            1.0,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for bi in 0..batch {
                        let as_ = &da[bi * m * k..(bi + 1) * m * k];
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // B stored n x k: dB += G^T A
                            gemm(n, m, k, gs, (1, n), as_, (k, 1), 1.0, dst);
                        } else {
                            gemm(k, m, n, as_, (1, k), gs, (n, 1), 1.0, dst);
                        }
                    }
                }
            }
            Op::Permute(a, axes) => {
                if let Some(ga) = acc!(*a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (back, _) = permute_data(g, out.shape(), &inverse);
                    ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Unfold { input, size, step } => {
                if let Some(ga) = acc!(*input) {
                    let len = last_dim(nodes[input.0].value.shape());
                    let count = (len - size) / step + 1;
                    for (r, row) in ga.chunks_mut(len).enumerate() {
                        let gr = &g[r * count * size..(r + 1) * count * size];
                        for i in 0..count {
                            for p in 0..*size {
                                row[i * step + p] += gr[i * size + p];
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = acc!(*a) {
                    let n = last_dim(out.shape());
                    for ((gr, yr), dst) in
                        g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((d, gx), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d += y * (gx - dot);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                if let Some(ga) = acc!(*a) {
                    for ((d, gy), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *d += gy * gelu_grad(xv);
                    }
                }
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                if let Some(ga) = acc!(*a) {
                    for ((d, gy), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gy;
                        }
                    }
                }
            }
            Op::Reciprocal(a, offset) => {
                let x = nodes[a.0].value.data();
                if let Some(ga) = acc!(*a) {
                    for ((d, gy), &xv) in ga.iter_mut().zip(g).zip(x) {
                        let r = 1.0 / (xv + offset);
                        *d -= gy * r * r;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = acc!(*a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::MeanLast(a) => {
                if let Some(ga) = acc!(*a) {
                    let n = last_dim(nodes[a.0].value.shape());
                    for (row, gv) in ga.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|x| *x += gv / n as f64);
                    }
                }
            }
            Op::VarLast(a) => {
                let x = nodes[a.0].value.data();
                if let Some(ga) = acc!(*a) {
                    let n = last_dim(nodes[a.0].value.shape());
                    for ((row, xr), gv) in ga.chunks_mut(n).zip(x.chunks(n)).zip(g) {
                        let m = xr.iter().sum::<f64>() / n as f64;
                        for (d, xv) in row.iter_mut().zip(xr) {
                            *d += gv * 2.0 * (xv - m) / n as f64;
                        }
                    }
                }
            }
            Op::NormalizeRows { input, inv_std } => {
                if let Some(ga) = acc!(*input) {
                    let n = last_dim(out.shape());
                    for (((dst, gr), yr), inv) in ga
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(out.data().chunks(n))
                        .zip(inv_std)
                    {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((d, gx), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d += inv * (gx - mg - y * mgy);
                        }
                    }
                }
            }
            Op::NormalizeCols { input, inv_std } => {
                if let Some(ga) = acc!(*input) {
                    let cols = inv_std.len();
                    let rows = g.len() / cols;
                    let mut mg = vec![0.0; cols];
                    let mut mgy = vec![0.0; cols];
                    for (gr, yr) in g.chunks(cols).zip(out.data().chunks(cols)) {
                        for c in 0..cols {
                            mg[c] += gr[c];
                            mgy[c] += gr[c] * yr[c];
                        }
                    }
                    for c in 0..cols {
                        mg[c] /= rows as f64;
                        mgy[c] /= rows as f64;
                    }
                    for ((dst, gr), yr) in ga
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                    {
                        for c in 0..cols {
                            dst[c] += inv_std[c] * (gr[c] - mg[c] - yr[c] * mgy[c]);
                        }
                    }
                }
            }
            Op::CircularFilter { input, filter } => {
                let n = last_dim(out.shape());
                let plan = RealFft::new(n).expect("nonzero length");
                let bins = plan.bin_count();
                let zero = Complex64::new(0.0, 0.0);
                let mut gspec = vec![zero; bins];
                let mut tmp = vec![zero; bins];
                let need_input = nodes[input.0].requires_grad;
                let need_filter = nodes[filter.0].requires_grad;
                let mut transfer = vec![zero; bins];
                plan.forward_into(nodes[filter.0].value.data(), &mut transfer);
                // Correlation in time is conjugate multiplication in frequency.
                let mut filter_acc = vec![zero; bins];
                let mut row_grad = vec![0.0; n];
                let xs = nodes[input.0].value.data();
                let mut gin = if need_input { acc!(*input) } else { None };
                for (r, gr) in g.chunks(n).enumerate() {
                    plan.forward_into(gr, &mut gspec);
                    if let Some(gi) = gin.as_deref_mut() {
                        for ((t, gs), w) in tmp.iter_mut().zip(&gspec).zip(&transfer) {
                            *t = gs * w.conj();
                        }
                        plan.inverse_into(&tmp, &mut row_grad);
                        for (d, v) in gi[r * n..(r + 1) * n].iter_mut().zip(&row_grad) {
                            *d += v;
                        }
                    }
                    if need_filter {
                        plan.forward_into(&xs[r * n..(r + 1) * n], &mut tmp);
                        for ((f, gs), y) in filter_acc.iter_mut().zip(&gspec).zip(&tmp) {
                            *f += gs * y.conj();
                        }
                    }
                }
                if let Some(gf) = acc!(*filter) {
                    plan.inverse_into(&filter_acc, &mut row_grad);
                    gf.iter_mut().zip(&row_grad).for_each(|(x, y)| *x += y);
                }
            }
            Op::MseLoss(p, t) => {
                let (dp, dt) = (nodes[p.0].value.data(), nodes[t.0].value.data());
                let scale = 2.0 * g[0] / dp.len() as f64;
                if let Some(gp) = acc!(*p) {
                    for ((d, a), b) in gp.iter_mut().zip(dp).zip(dt) {
                        *d += scale * (a - b);
                    }
                }
                if let Some(gt) = acc!(*t) {
                    for ((d, a), b) in gt.iter_mut().zip(dp).zip(dt) {
                        *d -= scale * (a - b);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape, data: &[f64], grad: bool) -> Var {
        tape.leaf(Tensor::vector(data.to_vec()).with_requires_grad(grad))
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[0.0, 0.0], false);
        let y = t.softmax(x);
        assert_eq!(t.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let a = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = t.constant(Tensor::eye(3));
        let av = t.constant(a.clone());
        let y = t.matmul(i, av).unwrap();
        assert_eq!(t.value(y).data(), a.data());
    }

    #[test]
    fn mean_of_small_vector() {
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[1.0, 2.0, 3.0], false);
        let m = t.mean(x);
        assert_eq!(t.data(m), &[2.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[1.0, 2.0], true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), vec![2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[1.0, 2.0], true);
        let c = vec_var(&mut t, &[3.0], false);
        let loss = t.sum(c);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[1.0, 2.0], true);
        assert!(matches!(t.backward(x), Err(Error::InvalidArgument(_))));
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 2]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn general_broadcast_over_middle_axis() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap());
        let b = t.constant(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let y = t.add_broadcast(a, b).unwrap();
        assert_eq!(t.data(y), &[10.0, 11.0, 22.0, 23.0, 14.0, 15.0, 26.0, 27.0]);
    }

    #[test]
    fn unfold_cuts_windows() {
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[0.0, 1.0, 2.0, 3.0, 4.0], false);
        let w = t.unfold(x, 2, 2).unwrap();
        assert_eq!(t.shape(w), &[2, 2]);
        assert_eq!(t.data(w), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(p), &[4, 2, 3]);
        assert_eq!(t.value(p).get(&[3, 1, 2]), t.value(x).get(&[1, 2, 3]));
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.data(back), t.data(x));
    }
}

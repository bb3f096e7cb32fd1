//! Define-by-run tape with reverse-mode backward.
//!
//! Every operation appends a node whose inputs precede it, so the tape order
//! is already a topological order and backward is a single reverse sweep.
//! Broadcasting is limited to a one-element operand in the binary ops; row
//! broadcasting is spelled out with [`Graph::expand_rows`].

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rustfft::num_complex::Complex;

use super::linalg::gemm;
use super::{GradError, Tensor};
use crate::audio::{MelFilterbank, StftPlan};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1-D convolution over a `(time, channels)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dSpec {
    /// Stride-1 convolution padded to keep the time length.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        Self { kernel, stride: 1, dilation, pad_left: total / 2, pad_right: total - total / 2 }
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel.max(1) - 1) + 1;
        let padded = len + self.pad_left + self.pad_right;
        (padded >= span && self.stride > 0 && self.kernel > 0).then(|| (padded - span) / self.stride + 1)
    }
}

enum Op {
    Leaf,
    StopGradient(Var),
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, spec: Conv1dSpec, cols: Vec<f64> },
    ConvTranspose1d { x: Var, w: Var, stride: usize, kernel: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ExpandRows(Var),
    Concat { inputs: Vec<Var>, outer: usize, inners: Vec<usize> },
    Slice { x: Var, outer: usize, inner_in: usize, offset: usize, inner_out: usize },
    MeanPoolTime(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    MelApply { x: Var, fb: Arc<MelFilterbank>, shifted: Vec<f64> },
    StftPower { x: Var, plan: Arc<StftPlan>, spectra: Vec<Complex<f64>> },
    LogSoftmax(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient(_) => "stop_gradient",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv_transpose1d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::ExpandRows(_) => "expand_rows",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MeanPoolTime(_) => "mean_pool_time",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MelApply { .. } => "mel_apply",
            Op::StftPower { .. } => "stft_power",
            Op::LogSoftmax(_) => "log_softmax",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::StopGradient(x)
            | Op::Affine(x, _)
            | Op::ExpandRows(x)
            | Op::MeanPoolTime(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::LogSoftmax(x)
            | Op::Slice { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::MelApply { x, .. }
            | Op::StftPower { x, .. } => vec![*x],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv1d { x, w, .. } | Op::ConvTranspose1d { x, w, .. } => vec![*x, *w],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for anything that is not one.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.leaves.remove(&var.0)
    }
}

/// A single-use recording of a computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    spent: bool,
    frozen_barriers: Option<VecDeque<Tensor>>,
    barrier_values: Vec<Tensor>,
}

#[cfg(test)]
thread_local! {
    /// Scales the first operand's gradient in `mul` backward, so tests can
    /// confirm the gradient checker notices a wrong derivative.
    pub(crate) static CORRUPT_MUL_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

fn shape_err(msg: impl Into<String>) -> GradError {
    GradError::ShapeMismatch(msg.into())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Result shape of a binary op with one-element broadcasting.
fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>, GradError> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(shape_err(format!("cannot combine {:?} with {:?}", a.shape(), b.shape())))
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, GradError> {
    let shape = broadcast_shape(a, b)?;
    let data = if a.numel() == b.numel() {
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
    } else if b.is_scalar() {
        let y = b.item();
        a.data().iter().map(|x| f(*x, y)).collect()
    } else {
        let x = a.item();
        b.data().iter().map(|y| f(x, *y)).collect()
    };
    Tensor::new(shape, data)
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect()).expect("same shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `stop_gradient` outputs are replaced, in call order, by
    /// the given values. Finite-difference checks use this to hold barriered
    /// quantities fixed while perturbing parameters.
    pub fn with_frozen_barriers(values: Vec<Tensor>) -> Self {
        Self { frozen_barriers: Some(values.into()), ..Self::default() }
    }

    /// Forward values seen at every `stop_gradient`, in call order.
    pub fn barrier_values(&self) -> &[Tensor] {
        &self.barrier_values
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_spent(&self) -> bool {
        self.spent
    }

    /// Forward value of a node. Panics once backward has released the tape.
    pub fn value(&self, var: Var) -> &Tensor {
        assert!(!self.spent, "graph values are released by backward");
        &self.nodes[var.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push_leaf(value.clone(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push_leaf(Tensor::scalar(value), false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, GradError> {
        if let Some(bad) = value.data().iter().find(|v| !v.is_finite()) {
            return Err(GradError::NonFiniteValue(format!("{} produced {bad}", op.name())));
        }
        let requires_grad = match op {
            Op::StopGradient(_) => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_live(&self) -> Result<(), GradError> {
        if self.spent {
            Err(GradError::SpentTape)
        } else {
            Ok(())
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Forward identity; no gradient crosses this edge.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let value = match self.frozen_barriers.as_mut() {
            Some(queue) => {
                let v = queue.pop_front().ok_or_else(|| shape_err("frozen barrier queue exhausted"))?;
                if v.shape() != self.nodes[x.0].value.shape() {
                    return Err(shape_err("frozen barrier shape differs from live value"));
                }
                v
            }
            None => self.val(x).clone(),
        };
        self.barrier_values.push(value.clone());
        self.push(value, Op::StopGradient(x))
    }

    /// `(m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let (m, k) = self.val(a).dims2()?;
        let (k2, n) = self.val(b).dims2()?;
        if k != k2 {
            return Err(shape_err(format!("matmul ({m},{k}) x ({k2},{n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, &mut out, false);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// Convolution of `x: (T, C_in)` with `w: (kernel·C_in, C_out)`; the
    /// weight row for tap `k` and input channel `c` is `k·C_in + c`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: Conv1dSpec) -> Result<Var, GradError> {
        self.check_live()?;
        let (t, c_in) = self.val(x).dims2()?;
        let (rows, c_out) = self.val(w).dims2()?;
        if rows != spec.kernel * c_in {
            return Err(shape_err(format!("conv1d weight has {rows} rows, want {}", spec.kernel * c_in)));
        }
        let n = spec
            .output_len(t)
            .ok_or_else(|| shape_err(format!("conv1d input of length {t} shorter than kernel span")))?;
        let width = spec.kernel * c_in;
        let xd = self.val(x).data();
        let mut cols = vec![0.0; n * width];
        for i in 0..n {
            for k in 0..spec.kernel {
                let pos = (i * spec.stride + k * spec.dilation) as isize - spec.pad_left as isize;
                if pos < 0 || pos as usize >= t {
                    continue;
                }
                let src = &xd[pos as usize * c_in..(pos as usize + 1) * c_in];
                cols[i * width + k * c_in..i * width + (k + 1) * c_in].copy_from_slice(src);
            }
        }
        let mut out = vec![0.0; n * c_out];
        gemm(n, width, c_out, &cols, false, self.val(w).data(), false, &mut out, false);
        self.push(Tensor::matrix(n, c_out, out)?, Op::Conv1d { x, w, spec, cols })
    }

    /// Transposed convolution (overlap-add synthesis) of `x: (N, C_in)` with
    /// `w: (C_in, kernel·C_out)`; output is `((N − 1)·stride + kernel, C_out)`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize) -> Result<Var, GradError> {
        self.check_live()?;
        let (n, c_in) = self.val(x).dims2()?;
        let (rows, cols) = self.val(w).dims2()?;
        if rows != c_in || kernel == 0 || stride == 0 || cols % kernel != 0 || n == 0 {
            return Err(shape_err(format!("conv_transpose1d x ({n},{c_in}) w ({rows},{cols}) kernel {kernel}")));
        }
        let c_out = cols / kernel;
        let mut frames = vec![0.0; n * cols];
        gemm(n, c_in, cols, self.val(x).data(), false, self.val(w).data(), false, &mut frames, false);
        let len = (n - 1) * stride + kernel;
        let mut out = vec![0.0; len * c_out];
        for i in 0..n {
            let base = i * stride * c_out;
            for (o, f) in out[base..base + cols].iter_mut().zip(&frames[i * cols..(i + 1) * cols]) {
                *o += f;
            }
        }
        self.push(Tensor::matrix(len, c_out, out)?, Op::ConvTranspose1d { x, w, stride, kernel })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let out = binary(self.val(a), self.val(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let out = binary(self.val(a), self.val(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let out = binary(self.val(a), self.val(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, GradError> {
        self.check_live()?;
        let out = unary(self.val(x), |v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    /// Repeats a `(1, C)` row `rows` times.
    pub fn expand_rows(&mut self, x: Var, rows: usize) -> Result<Var, GradError> {
        self.check_live()?;
        let (r, c) = self.val(x).dims2()?;
        if r != 1 {
            return Err(shape_err(format!("expand_rows needs a single row, got {r}")));
        }
        let row = self.val(x).data();
        let data = (0..rows).flat_map(|_| row.iter().copied()).collect();
        self.push(Tensor::matrix(rows, c, data)?, Op::ExpandRows(x))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, GradError> {
        self.check_live()?;
        let first = inputs.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let base = self.val(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err(format!("concat axis {axis} for rank {}", base.len())));
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut axis_total = 0;
        let mut inners = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.val(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(format!("concat {base:?} with {s:?} on axis {axis}")));
            }
            axis_total += s[axis];
            inners.push(s[axis] * tail);
        }
        let mut data = Vec::with_capacity(outer * axis_total * tail);
        for o in 0..outer {
            for (v, inner) in inputs.iter().zip(&inners) {
                data.extend_from_slice(&self.val(*v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        self.push(Tensor::new(shape, data)?, Op::Concat { inputs: inputs.to_vec(), outer, inners })
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, GradError> {
        self.check_live()?;
        let shape = self.val(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err(format!("slice {start}..{} of axis {axis} in {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let tail: usize = shape[axis + 1..].iter().product();
        let inner_in = shape[axis] * tail;
        let inner_out = len * tail;
        let offset = start * tail;
        let src = self.val(x).data();
        let mut data = Vec::with_capacity(outer * inner_out);
        for o in 0..outer {
            data.extend_from_slice(&src[o * inner_in + offset..o * inner_in + offset + inner_out]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Tensor::new(out_shape, data)?, Op::Slice { x, outer, inner_in, offset, inner_out })
    }

    /// Mean over the time (row) axis: `(N, C) → (1, C)`.
    pub fn mean_pool_time(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let (n, c) = self.val(x).dims2()?;
        let mut out = vec![0.0; c];
        for row in self.val(x).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push(Tensor::matrix(1, c, out)?, Op::MeanPoolTime(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let out = unary(self.val(x), |v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let out = unary(self.val(x), sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let out = unary(self.val(x), f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Natural logarithm; non-positive inputs surface as `NonFiniteValue`.
    pub fn log(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let out = unary(self.val(x), f64::ln);
        self.push(out, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let out = unary(self.val(x), |v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let total = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Per-row standardization (no gain or bias) of a `(N, C)` tensor.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let (n, c) = self.val(x).dims2()?;
        let mut out = Vec::with_capacity(n * c);
        let mut inv_std = Vec::with_capacity(n);
        for row in self.val(x).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * inv));
            inv_std.push(inv);
        }
        self.push(Tensor::matrix(n, c, out)?, Op::LayerNorm { x, inv_std })
    }

    /// `ln(P · Fᵀ + floor)` for a power spectrogram `P: (frames, bins)` and a
    /// fixed filterbank `F: (n_mels, bins)`.
    pub fn mel_apply(&mut self, x: Var, fb: &Arc<MelFilterbank>) -> Result<Var, GradError> {
        self.check_live()?;
        let (frames, bins) = self.val(x).dims2()?;
        if bins != fb.n_bins() {
            return Err(shape_err(format!("mel_apply expects {} bins, got {bins}", fb.n_bins())));
        }
        let m = fb.n_mels();
        let mut shifted = vec![0.0; frames * m];
        gemm(frames, bins, m, self.val(x).data(), false, fb.weights(), true, &mut shifted, false);
        shifted.iter_mut().for_each(|v| *v += fb.floor());
        let out = shifted.iter().map(|v| v.ln()).collect();
        self.push(Tensor::matrix(frames, m, out)?, Op::MelApply { x, fb: Arc::clone(fb), shifted })
    }

    /// Framed power spectrogram `(frames, n_fft/2 + 1)` of a `(T, 1)` signal.
    pub fn stft_power(&mut self, x: Var, plan: &Arc<StftPlan>) -> Result<Var, GradError> {
        self.check_live()?;
        let (t, c) = self.val(x).dims2()?;
        if c != 1 {
            return Err(shape_err(format!("stft_power expects a (T, 1) signal, got ({t},{c})")));
        }
        let frames = plan.frame_count(t);
        if frames == 0 {
            return Err(shape_err(format!("stft_power input of {t} samples shorter than one window")));
        }
        let spectra = plan.spectra(self.val(x).data());
        let power = spectra.iter().map(|z| z.norm_sqr()).collect();
        let out = Tensor::matrix(frames, plan.n_bins(), power)?;
        self.push(out, Op::StftPower { x, plan: Arc::clone(plan), spectra })
    }

    /// Row-wise log-softmax of a `(R, K)` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, GradError> {
        self.check_live()?;
        let (r, k) = self.val(x).dims2()?;
        let mut out = Vec::with_capacity(r * k);
        for row in self.val(x).data().chunks(k) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        self.push(Tensor::matrix(r, k, out)?, Op::LogSoftmax(x))
    }

    /// Trainable leaves that feed `loss` only or partly through a
    /// `stop_gradient`. Their finite differences disagree with the analytic
    /// gradient unless the barrier values are frozen.
    pub fn barriered_leaves(&self, loss: Var) -> Vec<Var> {
        let mut reached = vec![false; self.nodes.len()];
        let mut behind = vec![false; self.nodes.len()];
        reached[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !reached[i] {
                continue;
            }
            let through = behind[i] || matches!(self.nodes[i].op, Op::StopGradient(_));
            for input in self.nodes[i].op.inputs() {
                reached[input.0] = true;
                behind[input.0] |= through;
            }
        }
        (0..self.nodes.len())
            .filter(|&i| behind[i] && self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf))
            .map(Var)
            .collect()
    }

    /// Reverse sweep from a scalar loss. The tape is released afterwards and
    /// a second call reports [`GradError::SpentTape`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, GradError> {
        self.check_live()?;
        if !self.val(loss).is_scalar() {
            return Err(GradError::NonScalarLoss(self.val(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }

        let mut leaves = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaves.insert(i, Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        self.spent = true;
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        Ok(Gradients { leaves })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<(), GradError> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).dims2()?;
                let (_, n) = self.val(*b).dims2()?;
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    gemm(m, n, k, g, false, self.val(*b).data(), true, ga, true);
                }
                if self.wants(*b) {
                    let gb = self.slot(grads, *b);
                    gemm(k, m, n, self.val(*a).data(), true, g, false, gb, true);
                }
            }
            Op::Conv1d { x, w, spec, cols } => {
                let (t, c_in) = self.val(*x).dims2()?;
                let (width, c_out) = self.val(*w).dims2()?;
                let n = out.dims2()?.0;
                if self.wants(*w) {
                    let gw = self.slot(grads, *w);
                    gemm(width, n, c_out, cols, true, g, false, gw, true);
                }
                if self.wants(*x) {
                    let mut gcols = vec![0.0; n * width];
                    gemm(n, c_out, width, g, false, self.val(*w).data(), true, &mut gcols, false);
                    let gx = self.slot(grads, *x);
                    for row in 0..n {
                        for k in 0..spec.kernel {
                            let pos = (row * spec.stride + k * spec.dilation) as isize - spec.pad_left as isize;
                            if pos < 0 || pos as usize >= t {
                                continue;
                            }
                            let dst = &mut gx[pos as usize * c_in..(pos as usize + 1) * c_in];
                            let src = &gcols[row * width + k * c_in..row * width + (k + 1) * c_in];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::ConvTranspose1d { x, w, stride, kernel } => {
                let (n, c_in) = self.val(*x).dims2()?;
                let (_, cols) = self.val(*w).dims2()?;
                let c_out = cols / kernel;
                let mut gframes = vec![0.0; n * cols];
                for row in 0..n {
                    let base = row * stride * c_out;
                    gframes[row * cols..(row + 1) * cols].copy_from_slice(&g[base..base + cols]);
                }
                if self.wants(*w) {
                    let gw = self.slot(grads, *w);
                    gemm(c_in, n, cols, self.val(*x).data(), true, &gframes, false, gw, true);
                }
                if self.wants(*x) {
                    let gx = self.slot(grads, *x);
                    gemm(n, cols, c_in, &gframes, false, self.val(*w).data(), true, gx, true);
                }
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, g, |_, gv| gv);
                self.accumulate_broadcast(grads, *b, g, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, g, |_, gv| gv);
                self.accumulate_broadcast(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                #[cfg(test)]
                let fault = if CORRUPT_MUL_BACKWARD.with(|c| c.get()) { 1.5 } else { 1.0 };
                #[cfg(not(test))]
                let fault = 1.0;
                let (va, vb) = (self.val(*a), self.val(*b));
                let pick = |t: &Tensor, idx: usize| if t.is_scalar() { t.item() } else { t.data()[idx] };
                self.accumulate_broadcast(grads, *a, g, |idx, gv| fault * gv * pick(vb, idx));
                self.accumulate_broadcast(grads, *b, g, |idx, gv| gv * pick(va, idx));
            }
            Op::Affine(x, scale) => {
                let gx = self.slot(grads, *x);
                for (d, gv) in gx.iter_mut().zip(g) {
                    *d += scale * gv;
                }
            }
            Op::ExpandRows(x) => {
                let c = self.val(*x).numel();
                let gx = self.slot(grads, *x);
                for row in g.chunks(c) {
                    for (d, gv) in gx.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
            Op::Concat { inputs, outer, inners } => {
                let total: usize = inners.iter().sum();
                let mut offset = 0;
                for (v, inner) in inputs.iter().zip(inners) {
                    if self.wants(*v) {
                        let gv = self.slot(grads, *v);
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + inner];
                            for (d, s) in gv[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += inner;
                }
            }
            Op::Slice { x, outer, inner_in, offset, inner_out } => {
                let gx = self.slot(grads, *x);
                for o in 0..*outer {
                    let dst = &mut gx[o * inner_in + offset..o * inner_in + offset + inner_out];
                    for (d, s) in dst.iter_mut().zip(&g[o * inner_out..(o + 1) * inner_out]) {
                        *d += s;
                    }
                }
            }
            Op::MeanPoolTime(x) => {
                let (n, c) = self.val(*x).dims2()?;
                let gx = self.slot(grads, *x);
                for row in gx.chunks_mut(c) {
                    for (d, gv) in row.iter_mut().zip(g) {
                        *d += gv / n as f64;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                let gx = self.slot(grads, *x);
                for ((d, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = self.slot(grads, *x);
                for ((d, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Op::Tanh(x) => {
                let gx = self.slot(grads, *x);
                for ((d, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Log(x) => {
                let xv = self.val(*x).data();
                let gx = self.slot(grads, *x);
                for ((d, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                    *d += gv / v;
                }
            }
            Op::Square(x) => {
                let xv = self.val(*x).data();
                let gx = self.slot(grads, *x);
                for ((d, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                    *d += 2.0 * gv * v;
                }
            }
            Op::Sum(x) => {
                let gx = self.slot(grads, *x);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = out.dims2()?.1;
                let gx = self.slot(grads, *x);
                for (r, inv) in inv_std.iter().enumerate() {
                    let xhat = &out.data()[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gx = gr.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[r * c + j] += inv * (gr[j] - mean_g - xhat[j] * mean_gx);
                    }
                }
            }
            Op::MelApply { x, fb, shifted } => {
                let (frames, bins) = self.val(*x).dims2()?;
                let m = fb.n_mels();
                let gmel: Vec<f64> = g.iter().zip(shifted).map(|(gv, s)| gv / s).collect();
                let gx = self.slot(grads, *x);
                gemm(frames, m, bins, &gmel, false, fb.weights(), false, gx, true);
            }
            Op::StftPower { x, plan, spectra } => {
                let gx = self.slot(grads, *x);
                plan.power_backward(spectra, g, gx);
            }
            Op::LogSoftmax(x) => {
                let k = out.dims2()?.1;
                let gx = self.slot(grads, *x);
                for (r, row) in out.data().chunks(k).enumerate() {
                    let gsum: f64 = g[r * k..(r + 1) * k].iter().sum();
                    for j in 0..k {
                        gx[r * k + j] += g[r * k + j] - row[j].exp() * gsum;
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Accumulates `f(index, upstream)` into `v`, summing when `v` was the
    /// broadcast one-element operand.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.wants(v) {
            return;
        }
        let gv = self.slot(grads, v);
        if gv.len() == g.len() {
            for (idx, (d, up)) in gv.iter_mut().zip(g).enumerate() {
                *d += f(idx, *up);
            }
        } else {
            gv[0] += g.iter().enumerate().map(|(idx, up)| f(idx, *up)).sum::<f64>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{grad_check, Bound, GradCheckConfig, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// `Σ (f(x) + 0.3)²`, which gives every output entry a distinct weight.
    fn reduce(g: &mut Graph, y: Var) -> Result<Var, GradError> {
        let shift = g.scalar(0.3);
        let z = g.add(y, shift)?;
        let sq = g.square(z)?;
        g.sum(sq)
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn concat_shape_rule() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 4]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 7]);
        assert!(matches!(g.concat(&[a, b], 0), Err(GradError::ShapeMismatch(_))));
    }

    #[test]
    fn conv1d_matches_finite_differences_tightly() {
        let mut p = ParamSet::new();
        p.insert("x", random(&[8, 16], -1.0, 1.0, 1));
        p.insert("w", random(&[3 * 16, 5], -0.5, 0.5, 2));
        let cfg = GradCheckConfig { tol: 1e-6, max_coords: 256, ..GradCheckConfig::default() };
        let report = grad_check(&p, |g, b| {
            let y = g.conv1d(b["x"], b["w"], Conv1dSpec::same(3, 1))?;
            reduce(g, y)
        }, &cfg)
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn conv1d_matches_a_direct_sum() {
        let x = random(&[10, 2], -1.0, 1.0, 3);
        let w = random(&[3 * 2, 4], -1.0, 1.0, 4);
        let spec = Conv1dSpec { kernel: 3, stride: 2, dilation: 2, pad_left: 1, pad_right: 2 };
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv1d(xv, wv, spec).unwrap();
        let n = spec.output_len(10).unwrap();
        assert_eq!(g.value(y).shape(), &[n, 4]);
        for i in 0..n {
            for o in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    let pos = (i * 2 + k * 2) as isize - 1;
                    if (0..10).contains(&pos) {
                        for c in 0..2 {
                            acc += x.data()[pos as usize * 2 + c] * w.data()[(k * 2 + c) * 4 + o];
                        }
                    }
                }
                assert!((g.value(y).data()[i * 4 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn primitives_pass_gradcheck() {
        let cfg = GradCheckConfig { max_coords: 64, ..GradCheckConfig::default() };
        let suite = crate::grad::primitive_suite(&cfg).unwrap();
        assert_eq!(suite.len(), 25);
        for (name, report) in suite {
            assert!(report.passed && report.excluded.is_empty(), "{name}: {report:?}");
        }
    }

    #[test]
    fn stop_gradient_blocks_the_whole_path() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::scalar(3.0));
        let s = g.stop_gradient(p).unwrap();
        let loss = g.square(s).unwrap();
        assert_eq!(g.barriered_leaves(loss), vec![p]);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().item(), 0.0);
    }

    #[test]
    fn stop_gradient_keeps_the_open_path() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::scalar(3.0));
        let open = g.square(p).unwrap();
        let s = g.stop_gradient(p).unwrap();
        let closed = g.square(s).unwrap();
        let loss = g.add(open, closed).unwrap();
        assert_eq!(g.value(loss).item(), 18.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().item(), 6.0);
    }

    #[test]
    fn frozen_barriers_match_stop_gradient_semantics() {
        let mut p = ParamSet::new();
        p.insert("a", random(&[2, 3], 0.5, 1.0, 20));
        p.insert("b", random(&[2, 3], 0.5, 1.0, 21));
        let build = |g: &mut Graph, b: &Bound| {
            let prod = g.mul(b["a"], b["b"])?;
            let frozen = g.stop_gradient(prod)?;
            let t = g.tanh(frozen)?;
            let y = g.mul(t, b["b"])?;
            reduce(g, y)
        };
        let loose = grad_check(&p, build, &GradCheckConfig::default()).unwrap();
        assert_eq!(loose.excluded, vec!["a".to_string(), "b".to_string()]);
        let cfg = GradCheckConfig { freeze_barriers: true, ..GradCheckConfig::default() };
        let frozen = grad_check(&p, build, &cfg).unwrap();
        assert!(frozen.passed && frozen.excluded.is_empty(), "{frozen:?}");
        // `a` only reaches the loss through the barrier.
        assert!(frozen.params.iter().find(|c| c.name == "a").unwrap().analytic == 0.0);
    }

    #[test]
    fn matrix_vector_gradient_is_the_outer_product() {
        let w = random(&[3, 4], -1.0, 1.0, 30);
        let x = random(&[4, 1], -1.0, 1.0, 31);
        let mut g = Graph::new();
        let wv = g.param(&w);
        let xv = g.constant(x.clone());
        let y = g.matmul(wv, xv).unwrap();
        let sq = g.square(y).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(wv).unwrap();
        for i in 0..3 {
            let wx: f64 = (0..4).map(|j| w.data()[i * 4 + j] * x.data()[j]).sum();
            for j in 0..4 {
                assert!((gw.data()[i * 4 + j] - 2.0 * wx * x.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disconnected_parameter_gets_zeros() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::scalar(1.0));
        let q = g.param(&Tensor::zeros(&[2, 2]));
        let loss = g.square(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(q).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::scalar(1.0));
        let loss = g.square(p).unwrap();
        g.backward(loss).unwrap();
        assert!(g.is_spent());
        assert!(matches!(g.backward(loss), Err(GradError::SpentTape)));
        assert!(matches!(g.square(p), Err(GradError::SpentTape)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::zeros(&[2, 1]));
        let y = g.square(p).unwrap();
        assert!(matches!(g.backward(y), Err(GradError::NonScalarLoss(s)) if s == vec![2, 1]));
    }

    #[test]
    fn non_finite_outputs_are_reported() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::scalar(0.0));
        assert!(matches!(g.log(p), Err(GradError::NonFiniteValue(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = (x·x) + (x·x) + x with x = 1.5 → d/dx = 4x + 1.
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(1.5));
        let sq = g.mul(x, x).unwrap();
        let twice = g.add(sq, sq).unwrap();
        let loss = g.add(twice, x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(&random(&[6, 5], -1.0, 1.0, 40));
            let w = g.param(&random(&[5, 7], -1.0, 1.0, 41));
            let y = g.matmul(x, w).unwrap();
            let t = g.tanh(y).unwrap();
            let n = g.layer_norm(t).unwrap();
            let loss = reduce(&mut g, n).unwrap();
            let mut grads = g.backward(loss).unwrap();
            (grads.take(x).unwrap(), grads.take(w).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn corrupted_derivative_is_caught() {
        let mut p = ParamSet::new();
        p.insert("a", random(&[2, 2], 0.5, 1.0, 50));
        p.insert("b", random(&[2, 2], 0.5, 1.0, 51));
        let build = |g: &mut Graph, b: &Bound| {
            let y = g.mul(b["a"], b["b"])?;
            reduce(g, y)
        };
        CORRUPT_MUL_BACKWARD.with(|c| c.set(true));
        let bad = grad_check(&p, build, &GradCheckConfig::default());
        CORRUPT_MUL_BACKWARD.with(|c| c.set(false));
        let bad = bad.unwrap();
        assert!(!bad.passed);
        assert!(bad.params.iter().find(|c| c.name == "a").unwrap().max_rel_error > 0.3);
        assert!(grad_check(&p, build, &GradCheckConfig::default()).unwrap().passed);
    }
}

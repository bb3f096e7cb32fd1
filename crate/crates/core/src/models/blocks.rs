//! Dense layers and gated dilated-convolution temporal blocks.

use rand::Rng;

use crate::grad::{Bound, Conv1dSpec, GradError, Graph, ParamSet, Var};

const KERNEL: usize = 3;

fn var(b: &Bound, prefix: &str, name: &str) -> Result<Var, GradError> {
    b.var(&format!("{prefix}{name}"))
}

pub(crate) fn init_dense<R: Rng>(p: &mut ParamSet, prefix: &str, inputs: usize, outputs: usize, gain: f64, rng: &mut R) {
    p.insert_normal(&format!("{prefix}w"), &[inputs, outputs], inputs, gain, rng);
    p.insert_filled(&format!("{prefix}b"), &[1, outputs], 0.0);
}

/// `x · W + b` for `x: (N, in)`.
pub(crate) fn dense(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var, GradError> {
    let w = var(b, prefix, "w")?;
    let bias = var(b, prefix, "b")?;
    let y = g.matmul(x, w)?;
    let rows = g.value(y).shape()[0];
    let bias = g.expand_rows(bias, rows)?;
    g.add(y, bias)
}

/// Pre-norm residual block over `(N, width)`:
/// `x + proj(tanh(a) ⊙ σ(b))` with `[a, b] = conv(LN(x))`.
pub(crate) fn init_block<R: Rng>(p: &mut ParamSet, prefix: &str, width: usize, hidden: usize, rng: &mut R) {
    p.insert_filled(&format!("{prefix}ln_gain"), &[1, width], 1.0);
    p.insert_filled(&format!("{prefix}ln_bias"), &[1, width], 0.0);
    p.insert_normal(&format!("{prefix}conv_w"), &[KERNEL * width, 2 * hidden], KERNEL * width, 1.0, rng);
    p.insert_filled(&format!("{prefix}conv_b"), &[1, 2 * hidden], 0.0);
    init_dense(p, &format!("{prefix}proj_"), hidden, width, 0.5, rng);
}

pub(crate) fn block(g: &mut Graph, b: &Bound, prefix: &str, x: Var, dilation: usize) -> Result<Var, GradError> {
    let rows = g.value(x).shape()[0];
    let norm = g.layer_norm(x)?;
    let gain = var(b, prefix, "ln_gain")?;
    let gain = g.expand_rows(gain, rows)?;
    let shift = var(b, prefix, "ln_bias")?;
    let shift = g.expand_rows(shift, rows)?;
    let h = g.mul(norm, gain)?;
    let h = g.add(h, shift)?;

    let w = var(b, prefix, "conv_w")?;
    let h = g.conv1d(h, w, Conv1dSpec::same(KERNEL, dilation))?;
    let cb = var(b, prefix, "conv_b")?;
    let cb = g.expand_rows(cb, rows)?;
    let h = g.add(h, cb)?;
    let hidden = g.value(h).shape()[1] / 2;
    let a = g.slice(h, 1, 0, hidden)?;
    let a = g.tanh(a)?;
    let gate = g.slice(h, 1, hidden, hidden)?;
    let gate = g.sigmoid(gate)?;
    let h = g.mul(a, gate)?;
    let h = dense(g, b, &format!("{prefix}proj_"), h)?;
    g.add(x, h)
}

/// Blocks `0..n` under `{prefix}block{i}.` with dilations 1, 2, 4, ...
pub(crate) fn init_stack<R: Rng>(p: &mut ParamSet, prefix: &str, n: usize, width: usize, hidden: usize, rng: &mut R) {
    for i in 0..n {
        init_block(p, &format!("{prefix}block{i}."), width, hidden, rng);
    }
}

pub(crate) fn stack(g: &mut Graph, b: &Bound, prefix: &str, n: usize, mut x: Var) -> Result<Var, GradError> {
    for i in 0..n {
        x = block(g, b, &format!("{prefix}block{i}."), x, 1 << i)?;
    }
    Ok(x)
}

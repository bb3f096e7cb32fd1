//! Finite-difference checks over every differentiable primitive.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Bound, Conv1dSpec, GradCheckConfig, GradCheckReport, GradError, Graph, ParamSet, Tensor, Var};
use crate::audio::{MelConfig, MelFilterbank, StftPlan};

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

fn params(entries: &[(&str, Tensor)]) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, t) in entries {
        p.insert(*name, t.clone());
    }
    p
}

/// `Σ (f(x) + 0.3)²`, which gives every output entry a distinct weight.
fn reduce(g: &mut Graph, y: Var) -> Result<Var, GradError> {
    let shift = g.scalar(0.3);
    let z = g.add(y, shift)?;
    let sq = g.square(z)?;
    g.sum(sq)
}

type Case = (&'static str, ParamSet, Box<dyn Fn(&mut Graph, &Bound) -> Result<Var, GradError>>);

fn cases() -> Vec<Case> {
    let x = || random(&[3, 4], 0.2, 1.5, 7);
    let y = random(&[3, 4], -1.0, 1.0, 8);
    let s = random(&[], -1.0, 1.0, 9);
    let unary: Vec<Case> = vec![
        ("relu", params(&[("x", x())]), Box::new(|g, b| g.relu(b["x"]))),
        ("sigmoid", params(&[("x", x())]), Box::new(|g, b| g.sigmoid(b["x"]))),
        ("tanh", params(&[("x", x())]), Box::new(|g, b| g.tanh(b["x"]))),
        ("log", params(&[("x", x())]), Box::new(|g, b| g.log(b["x"]))),
        ("square", params(&[("x", x())]), Box::new(|g, b| g.square(b["x"]))),
        ("sum", params(&[("x", x())]), Box::new(|g, b| g.sum(b["x"]))),
        ("affine", params(&[("x", x())]), Box::new(|g, b| g.affine(b["x"], -1.7, 0.4))),
        ("layer_norm", params(&[("x", x())]), Box::new(|g, b| g.layer_norm(b["x"]))),
        ("log_softmax", params(&[("x", x())]), Box::new(|g, b| g.log_softmax(b["x"]))),
        ("mean_pool_time", params(&[("x", x())]), Box::new(|g, b| g.mean_pool_time(b["x"]))),
        ("slice_cols", params(&[("x", x())]), Box::new(|g, b| g.slice(b["x"], 1, 1, 2))),
        ("slice_rows", params(&[("x", x())]), Box::new(|g, b| g.slice(b["x"], 0, 2, 1))),
    ];
    let two = params(&[("x", x()), ("y", y), ("s", s)]);
    let binary: Vec<Case> = vec![
        ("add", two.clone(), Box::new(|g, b| g.add(b["x"], b["y"]))),
        ("sub", two.clone(), Box::new(|g, b| g.sub(b["x"], b["y"]))),
        ("mul", two.clone(), Box::new(|g, b| g.mul(b["x"], b["y"]))),
        ("mul_scalar", two.clone(), Box::new(|g, b| g.mul(b["x"], b["s"]))),
        ("sub_scalar", two.clone(), Box::new(|g, b| g.sub(b["s"], b["y"]))),
        ("concat_rows", two.clone(), Box::new(|g, b| g.concat(&[b["x"], b["y"]], 0))),
        ("concat_cols", two, Box::new(|g, b| g.concat(&[b["x"], b["y"], b["x"]], 1))),
    ];
    let spec = Conv1dSpec { kernel: 3, stride: 2, dilation: 2, pad_left: 2, pad_right: 1 };
    let plan = Arc::new(StftPlan::new(16, 8, 32));
    let fb = Arc::new(
        MelFilterbank::new(&MelConfig { n_mels: 4, window_ms: 2.0, hop_ms: 1.0, ..MelConfig::default() })
            .expect("valid filterbank"),
    );
    let bins = fb.n_bins();
    let structured: Vec<Case> = vec![
        (
            "matmul",
            params(&[("x", x()), ("w", random(&[4, 5], -1.0, 1.0, 10))]),
            Box::new(|g, b| g.matmul(b["x"], b["w"])),
        ),
        ("expand_rows", params(&[("r", random(&[1, 3], -1.0, 1.0, 11))]), Box::new(|g, b| g.expand_rows(b["r"], 4))),
        (
            "conv1d",
            params(&[("x", random(&[11, 3], -1.0, 1.0, 12)), ("w", random(&[9, 2], -1.0, 1.0, 13))]),
            Box::new(move |g, b| g.conv1d(b["x"], b["w"], spec)),
        ),
        (
            "conv_transpose1d",
            params(&[("x", random(&[5, 3], -1.0, 1.0, 14)), ("w", random(&[3, 8], -1.0, 1.0, 15))]),
            Box::new(|g, b| g.conv_transpose1d(b["x"], b["w"], 4, 2)),
        ),
        (
            "stft_power",
            params(&[("x", random(&[64, 1], -1.0, 1.0, 16))]),
            Box::new(move |g, b| g.stft_power(b["x"], &plan)),
        ),
        (
            "mel_apply",
            params(&[("p", random(&[3, bins], 0.1, 2.0, 17))]),
            Box::new(move |g, b| g.mel_apply(b["p"], &fb)),
        ),
    ];
    unary.into_iter().chain(binary).chain(structured).collect()
}

/// Gradient checks of every primitive, each wrapped in a weighted square so
/// all output entries matter.
pub fn primitive_suite(cfg: &GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>, GradError> {
    cases()
        .into_iter()
        .map(|(name, p, f)| {
            let report = grad_check(
                &p,
                |g, b| {
                    let y = f(g, b)?;
                    reduce(g, y)
                },
                cfg,
            )?;
            Ok((name.to_string(), report))
        })
        .collect()
}

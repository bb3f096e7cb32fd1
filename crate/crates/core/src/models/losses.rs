//! Graph versions of the separation losses. References `s` and `n` are
//! constants; only the estimates and the target carry gradients.

use std::f64::consts::LN_10;

use super::ModelError;
use crate::grad::{Graph, Tensor, Var};
use crate::metrics::{dot, MetricsError, ThresholdConfig, GRAM_TOL, RESIDUAL_EPS};

const DB: f64 = 10.0 / LN_10;

fn energy(v: &[f64]) -> f64 {
    dot(v, v)
}

fn column(g: &mut Graph, v: &[f64]) -> Var {
    g.constant(Tensor::column(v.to_vec()))
}

fn check_len(g: &Graph, y: Var, len: usize) -> Result<(), ModelError> {
    let got = g.value(y).numel();
    if got != len {
        return Err(MetricsError::LengthMismatch(got, len).into());
    }
    Ok(())
}

fn sum_of_squares(g: &mut Graph, v: Var) -> Result<Var, ModelError> {
    let sq = g.square(v)?;
    Ok(g.sum(sq)?)
}

/// `−10·log10(‖a‖² / (‖a − b‖² + τ‖a‖²))` with `a` fixed.
pub fn thresholded_snr_loss(g: &mut Graph, a: &[f64], b: Var, tau: f64) -> Result<Var, ModelError> {
    check_len(g, b, a.len())?;
    let ea = energy(a);
    if ea == 0.0 {
        return Err(MetricsError::SilentReference.into());
    }
    let av = column(g, a);
    let diff = g.sub(b, av)?;
    let err = sum_of_squares(g, diff)?;
    let floor = g.scalar(tau * ea);
    let denom = g.add(err, floor)?;
    let log = g.log(denom)?;
    Ok(g.affine(log, DB, -DB * ea.ln())?)
}

/// `α·L(s, y1) + (1 − α)·L(n, y2)`.
pub fn se_loss(g: &mut Graph, s: &[f64], n: &[f64], y1: Var, y2: Var, cfg: &ThresholdConfig) -> Result<Var, ModelError> {
    let speech = thresholded_snr_loss(g, s, y1, cfg.tau)?;
    let noise = thresholded_snr_loss(g, n, y2, cfg.tau)?;
    let speech = g.affine(speech, cfg.alpha, 0.0)?;
    let noise = g.affine(noise, 1.0 - cfg.alpha, 0.0)?;
    Ok(g.add(speech, noise)?)
}

/// Achieved SNRi of `y1` in dB. The residual energy is floored at
/// `RESIDUAL_EPS·‖s‖²`, the point where the exact metric switches to its cap.
pub fn snri(g: &mut Graph, s: &[f64], n: &[f64], y1: Var) -> Result<Var, ModelError> {
    check_len(g, y1, s.len())?;
    if s.len() != n.len() {
        return Err(MetricsError::LengthMismatch(s.len(), n.len()).into());
    }
    let (ss, nn) = (energy(s), energy(n));
    if ss == 0.0 {
        return Err(MetricsError::SilentReference.into());
    }
    if nn == 0.0 {
        return Err(MetricsError::SilentNoise.into());
    }
    let sv = column(g, s);
    let r = g.sub(y1, sv)?;
    let err = sum_of_squares(g, r)?;
    let floor = g.scalar(RESIDUAL_EPS * ss);
    let err = g.add(err, floor)?;
    let log = g.log(err)?;
    Ok(g.affine(log, -DB, DB * nn.ln())?)
}

/// Thresholded negative SAR of `y1`: the residual's component outside
/// span{s, n}, measured against `s`.
pub fn sar_loss(g: &mut Graph, s: &[f64], n: &[f64], y1: Var, tau: f64) -> Result<Var, ModelError> {
    check_len(g, y1, s.len())?;
    if s.len() != n.len() {
        return Err(MetricsError::LengthMismatch(s.len(), n.len()).into());
    }
    let (ss, nn, sn) = (energy(s), energy(n), dot(s, n));
    if ss == 0.0 {
        return Err(MetricsError::SilentReference.into());
    }
    if nn == 0.0 {
        return Err(MetricsError::SilentNoise.into());
    }
    let det = ss * nn - sn * sn;
    if det <= GRAM_TOL * ss * nn {
        return Err(MetricsError::DegenerateSubspace.into());
    }
    // Projection coefficients are linear in r: c_s = ⟨u, r⟩, c_n = ⟨v, r⟩.
    let u: Vec<f64> = s.iter().zip(n).map(|(a, b)| (nn * a - sn * b) / det).collect();
    let v: Vec<f64> = s.iter().zip(n).map(|(a, b)| (ss * b - sn * a) / det).collect();
    let sv = column(g, s);
    let nv = column(g, n);
    let uv = column(g, &u);
    let vv = column(g, &v);
    let r = g.sub(y1, sv)?;
    let ru = g.mul(r, uv)?;
    let cs = g.sum(ru)?;
    let rv = g.mul(r, vv)?;
    let cn = g.sum(rv)?;
    let ps = g.mul(sv, cs)?;
    let pn = g.mul(nv, cn)?;
    let interf = g.add(ps, pn)?;
    let artif = g.sub(r, interf)?;
    let ea = sum_of_squares(g, artif)?;
    let floor = g.scalar(tau * ss);
    let denom = g.add(ea, floor)?;
    let log = g.log(denom)?;
    Ok(g.affine(log, DB, -DB * ss.ln())?)
}

#[derive(Debug, Clone, Copy)]
pub struct SnriLossVars {
    pub total: Var,
    pub snri_term: Var,
    pub sar_term: Var,
    pub achieved: Var,
}

/// `|λ − SNRi(y1)|² + β·L_SAR(y1)` with `lambda: (1, 1)`.
pub fn snri_target_loss(
    g: &mut Graph,
    s: &[f64],
    n: &[f64],
    y1: Var,
    lambda: Var,
    cfg: &ThresholdConfig,
) -> Result<SnriLossVars, ModelError> {
    let achieved = snri(g, s, n, y1)?;
    let gap = g.sub(lambda, achieved)?;
    let sq = g.square(gap)?;
    let snri_term = g.sum(sq)?;
    let sar_term = sar_loss(g, s, n, y1, cfg.tau)?;
    let weighted = g.affine(sar_term, cfg.beta, 0.0)?;
    let total = g.add(snri_term, weighted)?;
    Ok(SnriLossVars { total, snri_term, sar_term, achieved })
}

/// Negative log-likelihood of `label` under log-probabilities `(1, K)`.
pub fn task_loss(g: &mut Graph, log_probs: Var, label: usize) -> Result<Var, ModelError> {
    let k = g.value(log_probs).shape()[1];
    if label >= k {
        return Err(ModelError::InvalidLabel { label, n_classes: k });
    }
    let picked = g.slice(log_probs, 1, label, 1)?;
    let nll = g.affine(picked, -1.0, 0.0)?;
    Ok(g.sum(nll)?)
}

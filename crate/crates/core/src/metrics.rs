//! Evaluation-grade separation metrics and losses, always in `f64`.
//!
//! These are the reference values the differentiable losses in
//! [`crate::models::losses`] are checked against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// SNRi reported when the residual `y1 − s` vanishes.
pub const SNRI_CAP: f64 = 100.0;
/// Residual energy below `RESIDUAL_EPS · ‖s‖²` counts as zero.
pub const RESIDUAL_EPS: f64 = 1e-20;
/// Relative Gram determinant below which `s` and `n` are treated as collinear.
pub const GRAM_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("reference signal is silent")]
    SilentReference,
    #[error("noise signal is silent")]
    SilentNoise,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("speech and noise are (nearly) collinear")]
    DegenerateSubspace,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    /// Soft threshold; caps the SNR-style losses at `−10·log10(1/τ)`.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Speech weight in the conventional separation loss.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Share of the mixture residual assigned to the speech estimate.
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    /// Weight of the artifact term in the SNRi target loss.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_tau() -> f64 {
    1e-3
}
fn default_alpha() -> f64 {
    0.8
}
fn default_zeta() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    0.01
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self { tau: default_tau(), alpha: default_alpha(), zeta: default_zeta(), beta: default_beta() }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(MetricsError::InvalidConfig(format!("tau = {} must be positive", self.tau)));
        }
        if !unit(self.alpha) || !unit(self.zeta) {
            return Err(MetricsError::InvalidConfig("alpha and zeta must lie in [0, 1]".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(MetricsError::InvalidConfig(format!("beta = {} must be non-negative", self.beta)));
        }
        Ok(())
    }
}

/// Speech estimate `y₁` and noise estimate `y₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedPair {
    pub speech: Vec<f64>,
    pub noise: Vec<f64>,
}

impl SeparatedPair {
    pub fn new(speech: Vec<f64>, noise: Vec<f64>) -> Result<Self, MetricsError> {
        same_len(&speech, &noise)?;
        Ok(Self { speech, noise })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SarDecomposition {
    /// Projection of the residual onto span{s, n}.
    pub e_interf: Vec<f64>,
    /// Residual component orthogonal to span{s, n}.
    pub e_artif: Vec<f64>,
    pub sar_db: f64,
    pub sar_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnriLoss {
    pub total: f64,
    /// `|λ − SNRi|²`.
    pub snri_term: f64,
    /// Unweighted thresholded SAR loss.
    pub sar_term: f64,
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

fn diff_energy(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

/// `10·log10(‖s‖² / ‖n‖²)`.
pub fn snr(s: &[f64], n: &[f64]) -> Result<f64, MetricsError> {
    same_len(s, n)?;
    let (es, en) = (energy(s), energy(n));
    if es == 0.0 {
        return Err(MetricsError::SilentReference);
    }
    if en == 0.0 {
        return Err(MetricsError::SilentNoise);
    }
    Ok(db(es / en))
}

/// Output SNR of `y1` minus input SNR of `s + n`, capped at [`SNRI_CAP`]
/// when the residual vanishes.
pub fn snri(s: &[f64], n: &[f64], y1: &[f64]) -> Result<f64, MetricsError> {
    same_len(s, n)?;
    same_len(s, y1)?;
    let (es, en) = (energy(s), energy(n));
    if es == 0.0 {
        return Err(MetricsError::SilentReference);
    }
    if en == 0.0 {
        return Err(MetricsError::SilentNoise);
    }
    let residual = diff_energy(y1, s);
    if residual < RESIDUAL_EPS * es {
        return Ok(SNRI_CAP);
    }
    // 10·log10(‖s‖²/‖r‖²) − 10·log10(‖s‖²/‖n‖²), with ‖s‖² cancelled.
    Ok(db(en / residual))
}

/// Splits `y1 − s` into interference (in span{s, n}) and artifacts.
pub fn sar_decompose(s: &[f64], n: &[f64], y1: &[f64], tau: f64) -> Result<SarDecomposition, MetricsError> {
    same_len(s, n)?;
    same_len(s, y1)?;
    let (ss, nn, sn) = (energy(s), energy(n), dot(s, n));
    if ss == 0.0 {
        return Err(MetricsError::SilentReference);
    }
    if nn == 0.0 {
        return Err(MetricsError::SilentNoise);
    }
    let det = ss * nn - sn * sn;
    if det <= GRAM_TOL * ss * nn {
        return Err(MetricsError::DegenerateSubspace);
    }
    let r: Vec<f64> = y1.iter().zip(s).map(|(y, a)| y - a).collect();
    let (bs, bn) = (dot(s, &r), dot(n, &r));
    let cs = (nn * bs - sn * bn) / det;
    let cn = (ss * bn - sn * bs) / det;
    let e_interf: Vec<f64> = s.iter().zip(n).map(|(a, b)| cs * a + cn * b).collect();
    let e_artif: Vec<f64> = r.iter().zip(&e_interf).map(|(ri, ei)| ri - ei).collect();
    let ea = energy(&e_artif);
    let sar_db = if ea < RESIDUAL_EPS * ss { SNRI_CAP } else { db(ss / ea) };
    let sar_loss = -db(ss / (ea + tau * ss));
    Ok(SarDecomposition { e_interf, e_artif, sar_db, sar_loss })
}

/// `−10·log10(‖a‖² / (‖a − b‖² + τ‖a‖²))`.
pub fn thresholded_snr_loss(a: &[f64], b: &[f64], tau: f64) -> Result<f64, MetricsError> {
    same_len(a, b)?;
    let ea = energy(a);
    if ea == 0.0 {
        return Err(MetricsError::SilentReference);
    }
    Ok(-db(ea / (diff_energy(a, b) + tau * ea)))
}

/// `α·L(s, y₁) + (1 − α)·L(n, y₂)` with the thresholded SNR loss.
pub fn se_loss(s: &[f64], n: &[f64], y: &SeparatedPair, cfg: &ThresholdConfig) -> Result<f64, MetricsError> {
    let speech = thresholded_snr_loss(s, &y.speech, cfg.tau)?;
    let noise = thresholded_snr_loss(n, &y.noise, cfg.tau)?;
    Ok(cfg.alpha * speech + (1.0 - cfg.alpha) * noise)
}

/// Distributes `e = x − (y₁ + y₂)` as `ζ·e` to speech and `(1 − ζ)·e` to noise.
pub fn mixture_consistency(x: &[f64], y: &SeparatedPair, zeta: f64) -> Result<SeparatedPair, MetricsError> {
    same_len(x, &y.speech)?;
    same_len(x, &y.noise)?;
    let mut speech = Vec::with_capacity(x.len());
    let mut noise = Vec::with_capacity(x.len());
    for ((xi, a), b) in x.iter().zip(&y.speech).zip(&y.noise) {
        let e = xi - (a + b);
        let a2 = a + zeta * e;
        speech.push(a2);
        // Noise takes whatever is left so the pair sums to x.
        noise.push(xi - a2);
    }
    Ok(SeparatedPair { speech, noise })
}

/// Weight `10^(−λ/20)` given to the noise estimate for target SNRi `λ`.
pub fn postmix_weight(lambda_db: f64) -> f64 {
    10f64.powf(-lambda_db / 20.0)
}

/// `y₁ + w·y₂` with `w = 10^(−λ/20)`.
pub fn postmix_control(y: &SeparatedPair, lambda_db: f64) -> Result<Vec<f64>, MetricsError> {
    if !lambda_db.is_finite() {
        return Err(MetricsError::InvalidConfig(format!("target {lambda_db} dB is not finite")));
    }
    same_len(&y.speech, &y.noise)?;
    let w = postmix_weight(lambda_db);
    Ok(y.speech.iter().zip(&y.noise).map(|(a, b)| a + w * b).collect())
}

/// `|λ − SNRi|² + β·L_SAR`.
pub fn snri_target_loss(
    s: &[f64],
    n: &[f64],
    y1: &[f64],
    lambda_db: f64,
    cfg: &ThresholdConfig,
) -> Result<SnriLoss, MetricsError> {
    let achieved = snri(s, n, y1)?;
    let sar = sar_decompose(s, n, y1, cfg.tau)?;
    let snri_term = (lambda_db - achieved).powi(2);
    Ok(SnriLoss { total: snri_term + cfg.beta * sar.sar_loss, snri_term, sar_term: sar.sar_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DB_4: f64 = 6.020_599_913_279_624; // 10·log10(4)

    #[test]
    fn snr_examples() {
        assert_eq!(snr(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((snr(&[2.0, 0.0], &[0.0, 1.0]).unwrap() - DB_4).abs() < 1e-12);
        assert_eq!(snr(&[1.0, 0.0], &[0.0, 0.0]), Err(MetricsError::SilentNoise));
        assert_eq!(snr(&[0.0, 0.0], &[0.0, 1.0]), Err(MetricsError::SilentReference));
    }

    #[test]
    fn snri_examples() {
        let (s, n) = ([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(snri(&s, &n, &[1.0, 1.0]).unwrap(), 0.0);
        assert!((snri(&s, &n, &[1.0, 0.5]).unwrap() - DB_4).abs() < 1e-12);
        assert_eq!(snri(&s, &n, &s).unwrap(), SNRI_CAP);
    }

    #[test]
    fn sar_of_perfect_output_hits_the_threshold() {
        let (s, n) = ([1.0, 0.3, -0.2], [0.1, 1.0, 0.4]);
        let d = sar_decompose(&s, &n, &s, 1e-3).unwrap();
        assert!(d.e_interf.iter().chain(&d.e_artif).all(|v| v.abs() < 1e-15));
        assert!((d.sar_loss + 30.0).abs() < 1e-12);
    }

    #[test]
    fn sar_hand_projection() {
        // Oracle: s and n are the first two axes, so the projection keeps the
        // first two coordinates of the residual.
        let d = sar_decompose(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[1.0, 0.2, 0.3], 1e-3).unwrap();
        assert!(d.e_interf.iter().zip([0.0, 0.2, 0.0]).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(d.e_artif.iter().zip([0.0, 0.0, 0.3]).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!((d.sar_db - 10.0 * (1.0f64 / 0.09).log10()).abs() < 1e-9);
        assert!((d.sar_db - 10.457_574_905_606_752).abs() < 1e-9);
    }

    #[test]
    fn collinear_basis_is_degenerate() {
        let s = [1.0, 2.0, 3.0];
        let n = [2.0, 4.0, 6.0];
        assert_eq!(sar_decompose(&s, &n, &s, 1e-3), Err(MetricsError::DegenerateSubspace));
    }

    #[test]
    fn thresholded_loss_examples() {
        let a = [0.5, -1.0, 2.0];
        assert!((thresholded_snr_loss(&a, &a, 1e-3).unwrap() + 30.0).abs() < 1e-12);
        let zero = thresholded_snr_loss(&a, &[0.0; 3], 1e-3).unwrap();
        assert!((zero + 10.0 * (1.0f64 / 1.001).log10()).abs() < 1e-15);
        assert!((zero - 0.004_340_774_793_186_3).abs() < 1e-12);
        assert_eq!(thresholded_snr_loss(&[0.0; 3], &a, 1e-3), Err(MetricsError::SilentReference));
    }

    #[test]
    fn se_loss_examples() {
        let cfg = ThresholdConfig::default();
        assert_eq!(cfg.alpha, 0.8);
        let (s, n) = (vec![1.0, 0.2], vec![-0.3, 0.9]);
        let perfect = SeparatedPair::new(s.clone(), n.clone()).unwrap();
        assert!((se_loss(&s, &n, &perfect, &cfg).unwrap() + 30.0).abs() < 1e-12);
        let bad = SeparatedPair::new(vec![0.5, 0.5], vec![0.0, 0.0]).unwrap();
        let speech_only = ThresholdConfig { alpha: 1.0, ..cfg };
        assert_eq!(
            se_loss(&s, &n, &bad, &speech_only).unwrap(),
            thresholded_snr_loss(&s, &bad.speech, cfg.tau).unwrap()
        );
    }

    #[test]
    fn consistency_examples() {
        let y = SeparatedPair::new(vec![0.3], vec![0.3]).unwrap();
        let out = mixture_consistency(&[1.0], &y, 0.5).unwrap();
        assert!((out.speech[0] - 0.5).abs() < 1e-15 && (out.noise[0] - 0.5).abs() < 1e-15);
        let again = mixture_consistency(&[1.0], &out, 0.5).unwrap();
        assert_eq!(again, out);
        let all_speech = mixture_consistency(&[1.0], &y, 1.0).unwrap();
        assert!((all_speech.speech[0] - 0.7).abs() < 1e-15);
        assert!((all_speech.noise[0] - 0.3).abs() < 1e-15);
        assert!(matches!(mixture_consistency(&[1.0, 2.0], &y, 0.5), Err(MetricsError::LengthMismatch(..))));
    }

    #[test]
    fn postmix_examples() {
        let y = SeparatedPair::new(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(postmix_control(&y, 0.0).unwrap(), vec![1.0, 1.0]);
        assert!((postmix_weight(DB_4) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn snri_target_loss_examples() {
        let cfg = ThresholdConfig::default();
        assert_eq!(cfg.beta, 0.01);
        let (s, n, y1) = ([1.0, 0.0], [0.0, 1.0], [1.0, 0.5]);
        let got = snri_target_loss(&s, &n, &y1, 3.0, &cfg).unwrap();
        // Residual [0, 0.5] lies in span{s, n}: no artifacts, SAR loss at the τ floor.
        let sar = sar_decompose(&s, &n, &y1, cfg.tau).unwrap().sar_loss;
        assert!((sar + 30.0).abs() < 1e-12);
        assert!((got.snri_term - (3.0 - DB_4).powi(2)).abs() < 1e-12);
        assert!((got.total - ((3.0 - DB_4).powi(2) + 0.01 * sar)).abs() < 1e-12);
        let on_target = snri_target_loss(&s, &n, &y1, DB_4, &cfg).unwrap();
        assert!((on_target.total - cfg.beta * on_target.sar_term).abs() < 1e-12);
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 32)
    }

    proptest! {
        #[test]
        fn decomposition_is_complete_orthogonal_and_optimal(s in vec3(), n in vec3(), y in vec3(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let d = match sar_decompose(&s, &n, &y, 1e-3) {
                Ok(d) => d,
                Err(MetricsError::DegenerateSubspace) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            let r: Vec<f64> = y.iter().zip(&s).map(|(p, q)| p - q).collect();
            let scale = energy(&r).sqrt().max(1e-300);
            for ((i, e), ri) in d.e_interf.iter().zip(&d.e_artif).zip(&r) {
                prop_assert!((i + e - ri).abs() <= 1e-12 * scale);
            }
            let ip = dot(&d.e_interf, &d.e_artif);
            prop_assert!(ip.abs() <= 1e-9 * energy(&d.e_interf).sqrt() * energy(&d.e_artif).sqrt() + 1e-300);
            let v: Vec<f64> = s.iter().zip(&n).map(|(p, q)| a * p + b * q).collect();
            prop_assert!(energy(&d.e_artif).sqrt() <= diff_energy(&r, &v).sqrt() + 1e-12);
        }

        #[test]
        fn identity_frontend_has_zero_snri(s in vec3(), n in vec3()) {
            prop_assume!(energy(&s) > 0.0 && energy(&n) > 0.0);
            let y: Vec<f64> = s.iter().zip(&n).map(|(p, q)| p + q).collect();
            prop_assert!(snri(&s, &n, &y).unwrap().abs() < 1e-12);
        }

        #[test]
        fn thresholded_loss_is_bounded_below(a in vec3(), b in vec3(), tau in 1e-6f64..1.0) {
            prop_assume!(energy(&a) > 0.0);
            let floor = -10.0 * (1.0 / tau).log10();
            prop_assert!(thresholded_snr_loss(&a, &b, tau).unwrap() >= floor - 1e-12);
        }

        #[test]
        fn postmix_hits_target_under_perfect_separation(s in vec3(), n in vec3(), lambda in 0.0f64..20.0) {
            prop_assume!(energy(&s) > 1e-3 && energy(&n) > 1e-3);
            let y = SeparatedPair::new(s.clone(), n.clone()).unwrap();
            let out = postmix_control(&y, lambda).unwrap();
            prop_assert!((snri(&s, &n, &out).unwrap() - lambda).abs() < 1e-6);
        }

        #[test]
        fn consistency_preserves_the_mixture(x in vec3(), a in vec3(), b in vec3(), zeta in 0.0f64..1.0) {
            let y = SeparatedPair::new(a, b).unwrap();
            let out = mixture_consistency(&x, &y, zeta).unwrap();
            for ((xi, p), q) in x.iter().zip(&out.speech).zip(&out.noise) {
                prop_assert!((p + q - xi).abs() <= 1e-12 * xi.abs().max(1.0));
            }
            let again = mixture_consistency(&x, &out, zeta).unwrap();
            for (p, q) in again.speech.iter().zip(&out.speech) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }
}

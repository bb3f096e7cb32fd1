//! Report builders for the `metrics` and `gradcheck` commands.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::audio::MelConfig;
use crate::grad::{grad_check, primitive_suite, GradCheckConfig, GradCheckReport};
use crate::metrics::{sar_decompose, snr, snri, snri_target_loss, MetricsError, ThresholdConfig};
use crate::models::{
    BackendConfig, FrontendDecision, JointInput, JointMode, JointWeights, ModelConfig, ModelError, Models,
    PredNetConfig, SnriNetConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub snr_in_db: f64,
    pub snri_db: f64,
    pub sar_db: f64,
    pub sar_loss: f64,
    pub snri_loss: f64,
}

/// Every metric of `y1` against references `s`, `n`, with the SNRi loss
/// taken at `target_db`.
pub fn metrics_report(
    s: &[f64],
    n: &[f64],
    y1: &[f64],
    target_db: f64,
    cfg: &ThresholdConfig,
) -> Result<MetricsReport, MetricsError> {
    if s.len() != y1.len() {
        return Err(MetricsError::LengthMismatch(s.len(), y1.len()));
    }
    if s.len() != n.len() {
        return Err(MetricsError::LengthMismatch(s.len(), n.len()));
    }
    let sar = sar_decompose(s, n, y1, cfg.tau)?;
    Ok(MetricsReport {
        snr_in_db: snr(s, n)?,
        snri_db: snri(s, n, y1)?,
        sar_db: sar.sar_db,
        sar_loss: sar.sar_loss,
        snri_loss: snri_target_loss(s, n, y1, target_db, cfg)?.total,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteReport {
    pub primitives: Vec<(String, GradCheckReport)>,
    pub joint: GradCheckReport,
    pub passed: bool,
}

/// The joint-loss test instance: T = 256, D_e = 8, D_b = 6, K = 3.
pub fn miniature_models() -> Result<Models, ModelError> {
    let cfg = ModelConfig {
        mel: MelConfig { n_mels: 6, window_ms: 4.0, hop_ms: 2.0, ..Default::default() },
        snri_net: SnriNetConfig { encoder_basis: 8, bottleneck: 6, n_blocks: 2, hidden: 4, ..Default::default() },
        pred_net: PredNetConfig { n_blocks: 1, hidden: 4, ..Default::default() },
        backend: BackendConfig { n_classes: 3, n_blocks: 1, hidden: 4 },
    };
    Models::new(&cfg, ThresholdConfig::default(), JointWeights::default())
}

/// Deterministic `(x, s, n)` of 256 samples for the miniature instance.
pub fn miniature_example() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s: Vec<f64> = (0..256).map(|i| 0.5 * (i as f64 * 0.21).sin() * (i as f64 * 0.013).cos()).collect();
    let n: Vec<f64> = (0..256).map(|i| 0.3 * ((i * i) as f64 * 0.37).sin()).collect();
    let x = s.iter().zip(&n).map(|(a, b)| a + b).collect();
    (x, s, n)
}

/// Finite-difference check of the full proposed joint loss on the miniature
/// instance, with barrier outputs held fixed so every parameter is probed.
pub fn joint_gradcheck(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport, HarnessError> {
    let models = miniature_models()?;
    let params = models.init(seed);
    let (x, s, n) = miniature_example();
    let cfg = GradCheckConfig { freeze_barriers: true, ..*cfg };
    grad_check(
        &params,
        |g, b| {
            let input = JointInput { x: &x, s: &s, n: &n, label: 2 };
            Ok::<_, HarnessError>(models.joint_terms(g, b, input, JointMode::Proposed, FrontendDecision::Frontend)?.total)
        },
        &cfg,
    )
}

pub fn grad_suite(cfg: &GradCheckConfig) -> Result<GradSuiteReport, HarnessError> {
    let primitives = primitive_suite(cfg)?;
    let joint = joint_gradcheck(cfg.seed, cfg)?;
    let passed = joint.passed && primitives.iter().all(|(_, r)| r.passed && r.excluded.is_empty());
    Ok(GradSuiteReport { primitives, joint, passed })
}

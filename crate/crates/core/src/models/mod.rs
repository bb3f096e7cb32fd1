//! SNRi-Net, the target predictor, the toy classification backend, and
//! their differentiable losses.

mod backend;
mod blocks;
mod joint;
pub mod losses;
mod pred_net;
mod snri_net;

pub use backend::Backend;
pub use joint::{FrontendDecision, JointInput, JointMode, JointTerms, JointWeights, Models};
pub use pred_net::PredNet;
pub use snri_net::SnriNet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioError, MelConfig};
use crate::grad::GradError;
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input of {len} samples is shorter than one {win}-sample window")]
    TooShort { len: usize, win: usize },
    #[error("label {label} outside 0..{n_classes}")]
    InvalidLabel { label: usize, n_classes: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Parameter-name prefixes, one per network.
pub mod group {
    pub const SNRI_NET: &str = "snri_net.";
    pub const SE_NET: &str = "se_net.";
    pub const PRED_NET: &str = "pred_net.";
    pub const BACKEND: &str = "backend.";
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnriNetConfig {
    /// Encoder/decoder basis size `D_e`.
    pub encoder_basis: usize,
    /// Bottleneck width `D_b`.
    pub bottleneck: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_blocks: usize,
    pub hidden: usize,
    pub zeta: f64,
}

impl Default for SnriNetConfig {
    fn default() -> Self {
        Self { encoder_basis: 64, bottleneck: 48, window_ms: 2.5, hop_ms: 1.25, n_blocks: 3, hidden: 64, zeta: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredNetConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for PredNetConfig {
    fn default() -> Self {
        Self { n_blocks: 2, hidden: 32, lambda_min: 0.0, lambda_max: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub n_classes: usize,
    pub n_blocks: usize,
    pub hidden: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { n_classes: 10, n_blocks: 2, hidden: 32 }
    }
}

/// Everything needed to build the networks. The predictor and the backend
/// share one log-mel front end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(default)]
    pub mel: MelConfig,
    #[serde(default)]
    pub snri_net: SnriNetConfig,
    #[serde(default)]
    pub pred_net: PredNetConfig,
    #[serde(default)]
    pub backend: BackendConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        let s = &self.snri_net;
        if !(s.hop_ms > 0.0 && s.window_ms >= s.hop_ms) {
            return bad("snri_net needs window_ms >= hop_ms > 0");
        }
        if s.encoder_basis == 0 || s.bottleneck == 0 || s.n_blocks == 0 || s.hidden == 0 {
            return bad("snri_net sizes must be at least 1");
        }
        if !(0.0..=1.0).contains(&s.zeta) {
            return bad("snri_net zeta must lie in [0, 1]");
        }
        let p = &self.pred_net;
        if !(p.lambda_min.is_finite() && p.lambda_max.is_finite() && p.lambda_min < p.lambda_max) {
            return bad("pred_net needs lambda_min < lambda_max");
        }
        if p.hidden == 0 || self.backend.hidden == 0 {
            return bad("hidden widths must be at least 1");
        }
        if self.backend.n_classes < 2 {
            return bad("backend needs at least 2 classes");
        }
        Ok(())
    }

    /// `(λ_min, λ_max)` in dB.
    pub fn lambda_range(&self) -> (f64, f64) {
        (self.pred_net.lambda_min, self.pred_net.lambda_max)
    }
}

/// Log-mel values are mapped with this fixed affine before the first dense
/// layer, which puts typical speech levels near the unit range.
pub(crate) const FEATURE_SCALE: f64 = 0.1;
pub(crate) const FEATURE_SHIFT: f64 = 0.5;

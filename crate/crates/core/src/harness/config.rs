use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::audio::CorpusConfig;
use crate::metrics::ThresholdConfig;
use crate::models::{JointWeights, ModelConfig, Models};
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Settings of the evaluation commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Mixtures written by `mix`.
    pub mixtures: usize,
    /// SNR range of the evaluation mixtures, in dB.
    pub mix_snr_range_db: [f64; 2],
    pub targets_db: Vec<f64>,
    pub input_snrs_db: Vec<f64>,
    /// Tone frequency of the predicted-target analysis.
    pub tone_hz: f64,
    /// Pass band of the band-limited noise in the predicted-target analysis.
    pub band_hz: [f64; 2],
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mixtures: 50,
            mix_snr_range_db: [-5.0, 20.0],
            targets_db: vec![3.0, 6.0, 9.0, 12.0],
            input_snrs_db: vec![-5.0, 5.0],
            tone_hz: 4000.0,
            band_hz: [300.0, 3400.0],
            seed: 1,
        }
    }
}

/// Every module's settings in one versioned document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_run_id() -> String {
    "run".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            run_id: default_run_id(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            thresholds: ThresholdConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| HarnessError::Config("missing integer `version`".into()))?;
        if found != u64::from(SCHEMA_VERSION) {
            return Err(HarnessError::Version { found, expected: SCHEMA_VERSION });
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad(format!("run_id `{}` must be a plain directory name", self.run_id));
        }
        self.model.validate()?;
        self.thresholds.validate()?;
        self.train.validate()?;
        if self.model.mel.sample_rate != self.corpus.sample_rate {
            return bad("model and corpus sample rates differ".into());
        }
        if self.model.backend.n_classes != self.corpus.n_classes {
            return bad("backend and corpus class counts differ".into());
        }
        let e = &self.eval;
        let [lo, hi] = e.mix_snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!("eval SNR range [{lo}, {hi}]"));
        }
        if e.targets_db.is_empty() || e.input_snrs_db.is_empty() || e.mixtures == 0 {
            return bad("eval needs targets, input SNRs and at least one mixture".into());
        }
        if e.targets_db.iter().chain(&e.input_snrs_db).any(|v| !v.is_finite()) {
            return bad("eval targets and SNRs must be finite".into());
        }
        Ok(())
    }

    pub fn models(&self) -> Result<Models, HarnessError> {
        let weights = JointWeights { eta: self.train.eta, gamma: self.train.gamma };
        Ok(Models::new(&self.model, self.thresholds, weights)?)
    }
}

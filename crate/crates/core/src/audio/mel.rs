use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AudioBuffer, AudioError, StftPlan, DEFAULT_SAMPLE_RATE};
use crate::grad::{GradError, Graph, Var};

/// Added to mel power before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    #[serde(default = "default_n_mels")]
    pub n_mels: usize,
    #[serde(default = "default_window_ms")]
    pub window_ms: f64,
    #[serde(default = "default_hop_ms")]
    pub hop_ms: f64,
}

fn default_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}
fn default_n_mels() -> usize {
    32
}
fn default_window_ms() -> f64 {
    25.0
}
fn default_hop_ms() -> f64 {
    10.0
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: default_rate(),
            n_mels: default_n_mels(),
            window_ms: default_window_ms(),
            hop_ms: default_hop_ms(),
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning `[0, Nyquist]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_fft: usize,
    win: usize,
    hop: usize,
    sample_rate: u32,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self, AudioError> {
        let rate = cfg.sample_rate as f64;
        let win = (cfg.window_ms * rate / 1000.0).round() as usize;
        let hop = (cfg.hop_ms * rate / 1000.0).round() as usize;
        if cfg.sample_rate == 0 || cfg.n_mels == 0 || win == 0 || hop == 0 || hop > win {
            return Err(AudioError::InvalidParams(format!("mel geometry {cfg:?}")));
        }
        let n_fft = win.next_power_of_two();
        let n_bins = n_fft / 2 + 1;
        let nyquist = rate / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * rate / n_fft as f64;
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
            let row: f64 = weights[m * n_bins..(m + 1) * n_bins].iter().sum();
            if row <= 0.0 {
                return Err(AudioError::InvalidParams(format!(
                    "mel filter {m} covers no FFT bin; use fewer mels or a longer window"
                )));
            }
        }
        Ok(Self { n_mels: cfg.n_mels, n_fft, win, hop, sample_rate: cfg.sample_rate, weights })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn win(&self) -> usize {
        self.win
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn floor(&self) -> f64 {
        LOG_FLOOR
    }

    /// `n_mels × n_bins`, row-major.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, mel: usize, bin: usize) -> f64 {
        self.weights[mel * self.n_bins() + bin]
    }
}

/// Filterbank plus matching STFT plan, usable on plain buffers or on a graph.
#[derive(Debug, Clone)]
pub struct LogMel {
    fb: Arc<MelFilterbank>,
    plan: Arc<StftPlan>,
}

impl LogMel {
    pub fn new(cfg: &MelConfig) -> Result<Self, AudioError> {
        let fb = MelFilterbank::new(cfg)?;
        let plan = StftPlan::new(fb.win, fb.hop, fb.n_fft);
        Ok(Self { fb: Arc::new(fb), plan: Arc::new(plan) })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.fb
    }

    pub fn frame_count(&self, len: usize) -> usize {
        self.plan.frame_count(len)
    }

    /// `frames × n_mels`, row-major.
    pub fn compute(&self, x: &[f64]) -> Result<Vec<f64>, AudioError> {
        let frames = self.plan.frame_count(x.len());
        if frames == 0 {
            return Err(AudioError::TooShort { len: x.len(), win: self.plan.win() });
        }
        let power = self.plan.power(x);
        let bins = self.fb.n_bins();
        let m = self.fb.n_mels;
        let mut out = vec![0.0; frames * m];
        for f in 0..frames {
            let p = &power[f * bins..(f + 1) * bins];
            for j in 0..m {
                let w = &self.fb.weights[j * bins..(j + 1) * bins];
                let mel: f64 = p.iter().zip(w).map(|(a, b)| a * b).sum();
                out[f * m + j] = (mel + LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }

    /// Differentiable log-mel of a `(T, 1)` signal on `graph`.
    pub fn apply(&self, graph: &mut Graph, x: Var) -> Result<Var, GradError> {
        let power = graph.stft_power(x, &self.plan)?;
        graph.mel_apply(power, &self.fb)
    }
}

/// Log-mel spectrogram of `x`, `frames × n_mels` row-major.
pub fn logmel(x: &AudioBuffer, fb: &MelFilterbank) -> Result<Vec<f64>, AudioError> {
    let lm = LogMel { fb: Arc::new(fb.clone()), plan: Arc::new(StftPlan::new(fb.win, fb.hop, fb.n_fft)) };
    lm.compute(x.samples())
}

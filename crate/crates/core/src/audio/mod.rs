//! Audio buffers, WAV persistence, SNR-controlled mixing, log-mel features
//! and the synthetic corpus.

mod corpus;
mod mel;
mod mix;
mod stft;
mod synth;
mod wav;

pub use corpus::{Corpus, CorpusConfig, CorpusItem, CorpusManifest, ItemKind, ManifestEntry};
pub use mel::{logmel, LogMel, MelConfig, MelFilterbank, LOG_FLOOR};
pub use mix::{mix_at_snr, peak_normalize_pair, Mixture};
pub use stft::StftPlan;
pub use synth::{synth_noise, NoiseKind, SpeechSynth};
pub use wav::{quantize_pcm16, wav_read, wav_write};

use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("reference signal is silent")]
    SilentReference,
    #[error("noise signal is silent")]
    SilentNoise,
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("invalid buffer: {0}")]
    InvalidBuffer(String),
    #[error("invalid class label {label} (have {n_classes} classes)")]
    InvalidLabel { label: usize, n_classes: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("signal of {len} samples is shorter than one {win}-sample window")]
    TooShort { len: usize, win: usize },
    #[error("unsupported WAV: {0}")]
    UnsupportedFormat(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Mono samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidBuffer("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(AudioError::InvalidBuffer("buffer is empty".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(AudioError::InvalidBuffer(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        (self.energy() / self.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Same rate, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self, AudioError> {
        Self::new(samples, self.sample_rate)
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self { samples: self.samples.iter().map(|v| v * gain).collect(), sample_rate: self.sample_rate }
    }

    pub(crate) fn check_compatible(&self, other: &AudioBuffer) -> Result<(), AudioError> {
        if self.sample_rate != other.sample_rate {
            return Err(AudioError::RateMismatch(self.sample_rate, other.sample_rate));
        }
        if self.len() != other.len() {
            return Err(AudioError::LengthMismatch(self.len(), other.len()));
        }
        Ok(())
    }
}

pub(crate) fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

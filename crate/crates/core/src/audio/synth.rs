//! Deterministic speech-like and noise signals.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AudioBuffer, AudioError};

const SPEECH_PEAK: f64 = 0.5;

/// Harmonic-stack "utterances" whose formant pattern and syllable envelope
/// identify a class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeechSynth {
    pub sample_rate: u32,
    pub n_classes: usize,
}

struct Formant {
    freq: f64,
    bandwidth: f64,
    gain: f64,
}

fn frac(v: f64) -> f64 {
    v - v.floor()
}

impl SpeechSynth {
    pub fn new(sample_rate: u32, n_classes: usize) -> Self {
        Self { sample_rate, n_classes }
    }

    fn formants(label: usize) -> [Formant; 3] {
        let c = label as f64;
        [
            Formant { freq: 300.0 + 500.0 * frac(c * 0.618_034), bandwidth: 90.0, gain: 1.0 },
            Formant { freq: 900.0 + 1600.0 * frac(c * 0.414_214 + 0.3), bandwidth: 130.0, gain: 0.7 },
            Formant { freq: 2300.0 + 1200.0 * frac(c * 0.732_051 + 0.55), bandwidth: 180.0, gain: 0.35 },
        ]
    }

    fn syllable_rate(label: usize) -> f64 {
        2.5 + 0.75 * (label % 4) as f64
    }

    pub fn render(&self, label: usize, duration_s: f64, seed: u64) -> Result<AudioBuffer, AudioError> {
        if label >= self.n_classes {
            return Err(AudioError::InvalidLabel { label, n_classes: self.n_classes });
        }
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(AudioError::InvalidParams(format!("duration {duration_s} s must be positive")));
        }
        let rate = self.sample_rate as f64;
        let len = ((duration_s * rate).round() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let f0_base: f64 = rng.random_range(100.0..200.0);
        let glide: f64 = if label.is_multiple_of(2) { 1.0 } else { -1.0 } * rng.random_range(0.1..0.3);
        let vibrato_rate: f64 = rng.random_range(4.0..6.0);
        let env_phase: f64 = rng.random_range(0.0..2.0 * PI);
        let env_power = 1.0 + ((label / 4) % 3) as f64;
        let syllables = Self::syllable_rate(label);
        let formants = Self::formants(label);

        let f0_max = f0_base * (1.0 + glide.abs() * 0.5) * 1.02;
        let n_harm = ((0.45 * rate / f0_max).floor() as usize).max(1);
        let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

        let mut out = Vec::with_capacity(len);
        let mut phase = 0.0;
        for i in 0..len {
            let t = i as f64 / rate;
            let progress = i as f64 / len as f64 - 0.5;
            let f0 = f0_base * (1.0 + glide * progress) * (1.0 + 0.02 * (2.0 * PI * vibrato_rate * t).sin());
            phase += 2.0 * PI * f0 / rate;
            let env = (0.5 - 0.5 * (2.0 * PI * syllables * t + env_phase).cos()).powf(env_power);
            let mut acc = 0.0;
            for (h, ph) in phases.iter().enumerate() {
                let k = (h + 1) as f64;
                let f = k * f0;
                let amp: f64 = formants
                    .iter()
                    .map(|fm| fm.gain / (1.0 + ((f - fm.freq) / fm.bandwidth).powi(2)))
                    .sum::<f64>()
                    / k.sqrt();
                acc += amp * (k * phase + ph).sin();
            }
            out.push(env * acc);
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            out.iter_mut().for_each(|v| *v *= SPEECH_PEAK / peak);
        }
        AudioBuffer::new(out, self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseKind {
    White,
    /// White noise restricted to `[low_hz, high_hz]`.
    Band { low_hz: f64, high_hz: f64 },
    Tone { freq_hz: f64 },
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Band { .. } => "band",
            NoiseKind::Tone { .. } => "tone",
        }
    }
}

fn unit_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// Unit-RMS noise of the given kind.
pub fn synth_noise(kind: NoiseKind, duration_s: f64, sample_rate: u32, seed: u64) -> Result<AudioBuffer, AudioError> {
    if !(duration_s.is_finite() && duration_s > 0.0) || sample_rate == 0 {
        return Err(AudioError::InvalidParams(format!("duration {duration_s} s at {sample_rate} Hz")));
    }
    let rate = sample_rate as f64;
    let nyquist = rate / 2.0;
    let len = ((duration_s * rate).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match kind {
        NoiseKind::White => (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        NoiseKind::Tone { freq_hz } => {
            if !(freq_hz > 0.0 && freq_hz < nyquist) {
                return Err(AudioError::InvalidParams(format!("tone {freq_hz} Hz outside (0, {nyquist}) Hz")));
            }
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            (0..len).map(|i| (2.0 * PI * freq_hz * i as f64 / rate + phase).sin()).collect()
        }
        NoiseKind::Band { low_hz, high_hz } => {
            if !(low_hz >= 0.0 && low_hz < high_hz && high_hz <= nyquist) {
                return Err(AudioError::InvalidParams(format!("band [{low_hz}, {high_hz}] Hz invalid below {nyquist} Hz")));
            }
            let mut buf: Vec<Complex<f64>> =
                (0..len).map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0)).collect();
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(len).process(&mut buf);
            for (k, c) in buf.iter_mut().enumerate() {
                let bin = k.min(len - k);
                let f = bin as f64 * rate / len as f64;
                if f < low_hz || f > high_hz {
                    *c = Complex::new(0.0, 0.0);
                }
            }
            planner.plan_fft_inverse(len).process(&mut buf);
            buf.iter().map(|c| c.re).collect()
        }
    };
    let samples = unit_rms(samples);
    if samples.iter().all(|v| *v == 0.0) {
        return Err(AudioError::InvalidParams(format!("{} noise came out silent", kind.name())));
    }
    AudioBuffer::new(samples, sample_rate)
}

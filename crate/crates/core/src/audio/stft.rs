//! Framed power spectra shared by the exact log-mel path and the
//! differentiable one in the gradient engine.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Hann-windowed, zero-padded real FFT framing.
#[derive(Clone)]
pub struct StftPlan {
    win: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftPlan")
            .field("win", &self.win)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl StftPlan {
    /// `n_fft` must be at least `win`; both must be non-zero.
    pub fn new(win: usize, hop: usize, n_fft: usize) -> Self {
        assert!(win > 0 && hop > 0 && n_fft >= win, "invalid STFT geometry");
        // Periodic Hann.
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
            .collect();
        let mut planner = FftPlanner::new();
        Self {
            win,
            hop,
            n_fft,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn win(&self) -> usize {
        self.win
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `floor((len - win) / hop) + 1`, or zero when the signal is shorter
    /// than one window.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            (len - self.win) / self.hop + 1
        }
    }

    /// Complex half spectra, `frames × n_bins`, row-major.
    pub fn spectra(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let frames = self.frame_count(x.len());
        let bins = self.n_bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            let start = f * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < self.win {
                    Complex::new(x[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        out
    }

    /// `|X|²` per frame and bin.
    pub fn power(&self, x: &[f64]) -> Vec<f64> {
        self.spectra(x).iter().map(|c| c.norm_sqr()).collect()
    }

    /// Accumulates `∂L/∂x` into `grad_x` given `∂L/∂P` for every power cell
    /// and the spectra returned by [`StftPlan::spectra`].
    pub(crate) fn power_backward(&self, spectra: &[Complex<f64>], grad_power: &[f64], grad_x: &mut [f64]) {
        let bins = self.n_bins();
        let frames = spectra.len() / bins;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for k in 0..bins {
                buf[k] = spectra[f * bins + k] * grad_power[f * bins + k];
            }
            // Unnormalized inverse transform: z[n] = Σ_k Z_k e^{+i2πkn/N}.
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for i in 0..self.win {
                grad_x[start + i] += 2.0 * buf[i].re * self.window[i];
            }
        }
    }
}

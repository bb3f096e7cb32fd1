use super::{energy, AudioBuffer, AudioError};

/// `x = s + k·n`, scaled so that `10·log10(‖s‖² / ‖k·n‖²) = snr_db`.
/// Returns the mixture and the scaled noise.
pub fn mix_at_snr(s: &AudioBuffer, n: &AudioBuffer, snr_db: f64) -> Result<(AudioBuffer, AudioBuffer), AudioError> {
    s.check_compatible(n)?;
    if !snr_db.is_finite() {
        return Err(AudioError::InvalidParams(format!("SNR {snr_db} dB is not finite")));
    }
    let es = energy(s.samples());
    let en = energy(n.samples());
    if es == 0.0 {
        return Err(AudioError::SilentReference);
    }
    if en == 0.0 {
        return Err(AudioError::SilentNoise);
    }
    let k = (es / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled = n.scaled(k);
    let x = s.samples().iter().zip(scaled.samples()).map(|(a, b)| a + b).collect();
    Ok((s.with_samples(x)?, scaled))
}

/// A mixture together with its components: `x = s + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub id: String,
    pub x: AudioBuffer,
    pub s: AudioBuffer,
    pub n: AudioBuffer,
    pub label: usize,
}

/// Scales `s` and `n` by one common gain so that `|s + n|` peaks at no more
/// than `limit`. The SNR is unchanged.
pub fn peak_normalize_pair(s: &AudioBuffer, n: &AudioBuffer, limit: f64) -> (AudioBuffer, AudioBuffer) {
    let peak = s
        .samples()
        .iter()
        .zip(n.samples())
        .fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
    if peak <= limit || peak == 0.0 {
        (s.clone(), n.clone())
    } else {
        let g = limit / peak;
        (s.scaled(g), n.scaled(g))
    }
}

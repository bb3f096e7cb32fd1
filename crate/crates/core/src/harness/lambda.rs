use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::control::write_csv_rows;
use super::{EvalConfig, HarnessError};
use crate::audio::{mix_at_snr, peak_normalize_pair, synth_noise, Mixture, NoiseKind};
use crate::grad::ParamSet;
use crate::metrics::snri;
use crate::models::Models;
use crate::rng::{derive_seed, purpose};
use crate::trainer::thread_pool;

pub const LAMBDA_HEADER: [&str; 5] = ["noise_kind", "input_snr_db", "lambda_hat_db", "achieved_snri_db", "utterance_id"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaAnalysisRecord {
    pub noise_kind: String,
    pub input_snr_db: f64,
    pub lambda_hat_db: f64,
    pub achieved_snri_db: f64,
    pub utterance_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCell {
    pub noise_kind: String,
    pub input_snr_db: f64,
    pub mean_lambda_hat_db: f64,
    pub mean_achieved_snri_db: f64,
    pub count: usize,
}

/// A qualitative expectation about the predicted targets, reported rather
/// than enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub description: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaReport {
    pub lambda_range_db: (f64, f64),
    pub all_in_range: bool,
    pub cells: Vec<LambdaCell>,
    pub expectations: Vec<Expectation>,
}

/// White, band-limited and tonal noise as configured.
pub fn lambda_noise_kinds(cfg: &EvalConfig) -> Vec<NoiseKind> {
    vec![
        NoiseKind::White,
        NoiseKind::Band { low_hz: cfg.band_hz[0], high_hz: cfg.band_hz[1] },
        NoiseKind::Tone { freq_hz: cfg.tone_hz },
    ]
}

/// Predicts the target for the speech of every mixture remixed with each
/// noise kind at each input SNR, and measures the SNRi SNRi-Net then
/// achieves with it.
pub fn eval_lambda(
    mixtures: &[Mixture],
    models: &Models,
    params: &ParamSet,
    kinds: &[NoiseKind],
    input_snrs_db: &[f64],
    seed: u64,
) -> Result<(Vec<LambdaAnalysisRecord>, LambdaReport), HarnessError> {
    let mut units = Vec::new();
    for (i, m) in mixtures.iter().enumerate() {
        for (k, kind) in kinds.iter().enumerate() {
            for snr in input_snrs_db {
                units.push((i, m, k, *kind, *snr));
            }
        }
    }
    let run = |(i, m, k, kind, snr): (usize, &Mixture, usize, NoiseKind, f64)| -> Result<LambdaAnalysisRecord, HarnessError> {
        let s = &m.s;
        let noise_seed = derive_seed(seed, &[purpose::EVAL, i as u64, k as u64]);
        let noise = synth_noise(kind, s.duration_s(), s.sample_rate(), noise_seed)?;
        if noise.len() < s.len() {
            return Err(HarnessError::Config(format!("noise of {} samples for {} of speech", noise.len(), s.len())));
        }
        let noise = noise.with_samples(noise.samples()[..s.len()].to_vec())?;
        let (_, n) = mix_at_snr(s, &noise, snr)?;
        let (s, n) = peak_normalize_pair(s, &n, 0.9);
        let x: Vec<f64> = s.samples().iter().zip(n.samples()).map(|(a, b)| a + b).collect();
        let lambda_hat = models.pred_net.predict(params, &x)?;
        let y = models.snri_net.enhance(params, &x, Some(lambda_hat))?;
        Ok(LambdaAnalysisRecord {
            noise_kind: kind.name().to_string(),
            input_snr_db: snr,
            lambda_hat_db: lambda_hat,
            achieved_snri_db: snri(s.samples(), n.samples(), &y.speech)?,
            utterance_id: m.id.clone(),
        })
    };
    let pool = thread_pool()?;
    let mut rows = pool.install(|| units.into_par_iter().map(run).collect::<Result<Vec<_>, _>>())?;
    rows.sort_by(|a, b| {
        a.noise_kind
            .cmp(&b.noise_kind)
            .then(a.input_snr_db.total_cmp(&b.input_snr_db))
            .then(a.utterance_id.cmp(&b.utterance_id))
    });
    let report = report(&rows, models.pred_net.lambda_range(), kinds, input_snrs_db);
    Ok((rows, report))
}

fn report(rows: &[LambdaAnalysisRecord], range: (f64, f64), kinds: &[NoiseKind], snrs: &[f64]) -> LambdaReport {
    let mut cells = Vec::new();
    for kind in kinds {
        for &snr in snrs {
            let sel: Vec<_> = rows.iter().filter(|r| r.noise_kind == kind.name() && r.input_snr_db == snr).collect();
            let n = sel.len().max(1) as f64;
            cells.push(LambdaCell {
                noise_kind: kind.name().to_string(),
                input_snr_db: snr,
                mean_lambda_hat_db: sel.iter().map(|r| r.lambda_hat_db).sum::<f64>() / n,
                mean_achieved_snri_db: sel.iter().map(|r| r.achieved_snri_db).sum::<f64>() / n,
                count: sel.len(),
            });
        }
    }
    let mean = |kind: &str, snr: f64| {
        cells.iter().find(|c| c.noise_kind == kind && c.input_snr_db == snr).map(|c| c.mean_lambda_hat_db)
    };
    let mut expectations = Vec::new();
    let lo = snrs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = snrs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo < hi {
        for kind in kinds {
            if let (Some(a), Some(b)) = (mean(kind.name(), lo), mean(kind.name(), hi)) {
                expectations.push(Expectation {
                    description: format!("{}: mean λ̂ at {lo} dB ({a:.2}) exceeds mean λ̂ at {hi} dB ({b:.2})", kind.name()),
                    holds: a > b,
                });
            }
        }
    }
    if let (Some(tone), Some(white)) = (mean("tone", lo), mean("white", lo)) {
        expectations.push(Expectation {
            description: format!("{lo} dB: mean λ̂ for tone ({tone:.2}) below white ({white:.2})"),
            holds: tone < white,
        });
    }
    LambdaReport {
        lambda_range_db: range,
        all_in_range: rows.iter().all(|r| (range.0..=range.1).contains(&r.lambda_hat_db)),
        cells,
        expectations,
    }
}

pub fn write_lambda_records(path: &Path, rows: &[LambdaAnalysisRecord]) -> Result<(), HarnessError> {
    write_csv_rows(path, &LAMBDA_HEADER, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{MelConfig, SpeechSynth};
    use crate::metrics::ThresholdConfig;
    use crate::models::{BackendConfig, JointWeights, ModelConfig, PredNetConfig, SnriNetConfig};

    #[test]
    fn every_cell_is_covered_and_bounded() {
        let cfg = ModelConfig {
            mel: MelConfig { n_mels: 6, ..Default::default() },
            snri_net: SnriNetConfig { encoder_basis: 8, bottleneck: 6, n_blocks: 1, hidden: 4, ..Default::default() },
            pred_net: PredNetConfig { n_blocks: 1, hidden: 4, ..Default::default() },
            backend: BackendConfig { n_classes: 3, n_blocks: 1, hidden: 4 },
        };
        let models = Models::new(&cfg, ThresholdConfig::default(), JointWeights::default()).unwrap();
        let params = models.init(0);
        let synth = SpeechSynth::new(16_000, 3);
        let mixtures: Vec<Mixture> = (0..2)
            .map(|i| {
                let s = synth.render(i, 0.06, i as u64).unwrap();
                Mixture { id: format!("u{i}"), x: s.clone(), n: s.clone(), s, label: i }
            })
            .collect();
        let kinds = lambda_noise_kinds(&EvalConfig::default());
        let (rows, report) = eval_lambda(&mixtures, &models, &params, &kinds, &[-5.0, 5.0], 4).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 2);
        assert!(report.all_in_range);
        assert_eq!(report.cells.len(), 6);
        assert!(report.cells.iter().all(|c| c.count == 2));
        assert_eq!(report.expectations.len(), 4);
        let again = eval_lambda(&mixtures, &models, &params, &kinds, &[-5.0, 5.0], 4).unwrap().0;
        assert_eq!(rows, again);
    }
}

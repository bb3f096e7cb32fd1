use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::audio::{mix_at_snr, peak_normalize_pair, quantize_pcm16, wav_read, wav_write, Corpus, Mixture};
use crate::metrics::snr;
use crate::rng::{purpose, rng_for};

/// File name of the index inside a mixture directory.
pub const MIX_INDEX: &str = "index.json";

/// Peak of `s + n` before quantization.
const MIX_PEAK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub id: String,
    pub speech_id: String,
    pub noise_id: String,
    pub label: usize,
    pub x: String,
    pub s: String,
    pub n: String,
    pub target_snr_db: f64,
    /// SNR of the stored speech and noise files.
    pub measured_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixIndex {
    pub sample_rate: u32,
    pub seed: u64,
    pub snr_range_db: [f64; 2],
    pub entries: Vec<MixEntry>,
}

/// Writes `count` mixtures of corpus speech and noise as WAV triples plus
/// an index. Speech and noise are quantized first and `x` is their exact sum,
/// so the stored triple is consistent to the bit.
pub fn write_mix_set(
    corpus: &Corpus,
    out_dir: &Path,
    count: usize,
    snr_range_db: [f64; 2],
    seed: u64,
) -> Result<MixIndex, HarnessError> {
    let speech: Vec<_> = corpus.speech().collect();
    let noise: Vec<_> = corpus.noise().collect();
    if speech.is_empty() || noise.is_empty() {
        return Err(HarnessError::EmptyCorpus);
    }
    let [lo, hi] = snr_range_db;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(HarnessError::Config(format!("SNR range [{lo}, {hi}]")));
    }
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = rng_for(seed, &[purpose::MIX, i as u64]);
        let sp = speech[rng.random_range(0..speech.len())];
        let no = noise[rng.random_range(0..noise.len())];
        let target = rng.random_range(lo..=hi);
        let len = sp.audio.len().min(no.audio.len());
        let s = sp.audio.with_samples(sp.audio.samples()[..len].to_vec())?;
        let n = no.audio.with_samples(no.audio.samples()[..len].to_vec())?;
        let (_, n) = mix_at_snr(&s, &n, target)?;
        let (s, n) = peak_normalize_pair(&s, &n, MIX_PEAK);
        let s = s.with_samples(quantize_pcm16(s.samples()))?;
        let n = n.with_samples(quantize_pcm16(n.samples()))?;
        let x = s.with_samples(s.samples().iter().zip(n.samples()).map(|(a, b)| a + b).collect())?;
        let id = format!("mix-{i:05}");
        let names = [format!("{id}_x.wav"), format!("{id}_s.wav"), format!("{id}_n.wav")];
        for (name, buf) in names.iter().zip([&x, &s, &n]) {
            wav_write(&out_dir.join(name), buf)?;
        }
        let [xn, sn, nn] = names;
        entries.push(MixEntry {
            id,
            speech_id: sp.entry.id.clone(),
            noise_id: no.entry.id.clone(),
            label: sp.entry.label.expect("speech items carry labels"),
            x: xn,
            s: sn,
            n: nn,
            target_snr_db: target,
            measured_snr_db: snr(s.samples(), n.samples())?,
        });
    }
    let index = MixIndex { sample_rate: corpus.sample_rate(), seed, snr_range_db, entries };
    fs::write(out_dir.join(MIX_INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

/// Reads every triple listed in `{dir}/index.json`.
pub fn load_mix_set(dir: &Path) -> Result<(MixIndex, Vec<Mixture>), HarnessError> {
    let index: MixIndex = serde_json::from_slice(&fs::read(dir.join(MIX_INDEX))?)?;
    let mixtures = index
        .entries
        .iter()
        .map(|e| {
            Ok(Mixture {
                id: e.id.clone(),
                x: wav_read(&dir.join(&e.x))?,
                s: wav_read(&dir.join(&e.s))?,
                n: wav_read(&dir.join(&e.n))?,
                label: e.label,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok((index, mixtures))
}

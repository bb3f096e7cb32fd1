//! Synthetic corpus and its JSON manifest.
//!
//! Every entry records the seed (and noise recipe) it was rendered from, so
//! a manifest alone is enough to regenerate the audio bit for bit.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{synth_noise, wav_read, wav_write, AudioBuffer, AudioError, NoiseKind, SpeechSynth};
use crate::rng::{derive_seed, purpose, rng_for};

const NOISE_PEAK: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Speech,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub kind: ItemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub duration_s: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub sample_rate: u32,
    pub n_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<(), AudioError> {
        let bad = |msg: String| Err(AudioError::Manifest(msg));
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return bad(format!("duplicate id `{}`", e.id));
            }
            match (e.kind, e.label, e.noise) {
                (ItemKind::Speech, Some(l), None) if l < self.n_classes => {}
                (ItemKind::Speech, Some(l), None) => return bad(format!("`{}` label {l} ≥ {}", e.id, self.n_classes)),
                (ItemKind::Speech, _, _) => return bad(format!("speech `{}` needs a label and no noise recipe", e.id)),
                (ItemKind::Noise, None, Some(_)) => {}
                (ItemKind::Noise, _, _) => return bad(format!("noise `{}` needs a recipe and no label", e.id)),
            }
            if !(e.duration_s.is_finite() && e.duration_s > 0.0) {
                return bad(format!("`{}` has duration {}", e.id, e.duration_s));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AudioError> {
        let m: CorpusManifest = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    pub n_classes: usize,
    pub speech_per_class: usize,
    pub noise_per_kind: usize,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, n_classes: 10, speech_per_class: 20, noise_per_kind: 20, duration_s: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub entry: ManifestEntry,
    pub audio: AudioBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    manifest: CorpusManifest,
    items: Vec<CorpusItem>,
}

fn random_noise_kind(index: usize, rng: &mut impl Rng, nyquist: f64) -> NoiseKind {
    match index % 3 {
        0 => NoiseKind::White,
        1 => {
            let low = rng.random_range(100.0..0.4 * nyquist);
            let width = rng.random_range(500.0..3000.0);
            NoiseKind::Band { low_hz: low, high_hz: (low + width).min(nyquist) }
        }
        _ => NoiseKind::Tone { freq_hz: rng.random_range(300.0..0.75 * nyquist) },
    }
}

impl Corpus {
    /// Renders `speech_per_class` utterances per class and `noise_per_kind`
    /// items of each noise kind (white, band, tone).
    pub fn synthesize(cfg: &CorpusConfig) -> Result<Self, AudioError> {
        let mut entries = Vec::new();
        for label in 0..cfg.n_classes {
            for i in 0..cfg.speech_per_class {
                let id = format!("speech-{label:02}-{i:04}");
                entries.push(ManifestEntry {
                    path: format!("speech/{id}.wav"),
                    id,
                    kind: ItemKind::Speech,
                    label: Some(label),
                    duration_s: cfg.duration_s,
                    seed: derive_seed(cfg.seed, &[purpose::CORPUS_SPEECH, label as u64, i as u64]),
                    noise: None,
                });
            }
        }
        let nyquist = cfg.sample_rate as f64 / 2.0;
        for i in 0..3 * cfg.noise_per_kind {
            let mut rng = rng_for(cfg.seed, &[purpose::CORPUS_NOISE, i as u64]);
            let kind = random_noise_kind(i, &mut rng, nyquist);
            let id = format!("noise-{}-{:04}", kind.name(), i / 3);
            entries.push(ManifestEntry {
                path: format!("noise/{id}.wav"),
                id,
                kind: ItemKind::Noise,
                label: None,
                duration_s: cfg.duration_s,
                seed: rng.random(),
                noise: Some(kind),
            });
        }
        Self::regenerate(&CorpusManifest { sample_rate: cfg.sample_rate, n_classes: cfg.n_classes, entries })
    }

    /// Re-renders every entry from its recorded seed and recipe.
    pub fn regenerate(manifest: &CorpusManifest) -> Result<Self, AudioError> {
        manifest.validate()?;
        let synth = SpeechSynth::new(manifest.sample_rate, manifest.n_classes);
        let items = manifest
            .entries
            .iter()
            .map(|e| {
                let audio = match (e.kind, e.label, e.noise) {
                    (ItemKind::Speech, Some(label), _) => synth.render(label, e.duration_s, e.seed)?,
                    (ItemKind::Noise, _, Some(kind)) => synth_noise(kind, e.duration_s, manifest.sample_rate, e.seed)?,
                    _ => unreachable!("validated"),
                };
                Ok(CorpusItem { entry: e.clone(), audio })
            })
            .collect::<Result<Vec<_>, AudioError>>()?;
        Ok(Self { manifest: manifest.clone(), items })
    }

    /// Reads the WAV files a manifest points at.
    pub fn load(manifest_path: &Path) -> Result<Self, AudioError> {
        let manifest = CorpusManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let items = manifest
            .entries
            .iter()
            .map(|e| {
                let audio = wav_read(&root.join(&e.path))?;
                if audio.sample_rate() != manifest.sample_rate {
                    return Err(AudioError::RateMismatch(audio.sample_rate(), manifest.sample_rate));
                }
                let audio = match e.kind {
                    ItemKind::Speech => audio,
                    ItemKind::Noise if audio.rms() > 0.0 => audio.scaled(1.0 / audio.rms()),
                    ItemKind::Noise => return Err(AudioError::SilentNoise),
                };
                Ok(CorpusItem { entry: e.clone(), audio })
            })
            .collect::<Result<Vec<_>, AudioError>>()?;
        Ok(Self { manifest, items })
    }

    /// Writes every item as WAV under `root` and the manifest as
    /// `root/manifest.json`; returns the manifest path.
    ///
    /// Unit-RMS noise would clip as PCM16, so noise is stored peak-scaled and
    /// brought back to unit RMS by [`Corpus::load`].
    pub fn write(&self, root: &Path) -> Result<PathBuf, AudioError> {
        for item in &self.items {
            let peak = item.audio.peak();
            if item.entry.kind == ItemKind::Noise && peak > NOISE_PEAK {
                wav_write(&root.join(&item.entry.path), &item.audio.scaled(NOISE_PEAK / peak))?;
            } else {
                wav_write(&root.join(&item.entry.path), &item.audio)?;
            }
        }
        let path = root.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(path)
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn items(&self) -> &[CorpusItem] {
        &self.items
    }

    pub fn speech(&self) -> impl Iterator<Item = &CorpusItem> {
        self.items.iter().filter(|i| i.entry.kind == ItemKind::Speech)
    }

    pub fn noise(&self) -> impl Iterator<Item = &CorpusItem> {
        self.items.iter().filter(|i| i.entry.kind == ItemKind::Noise)
    }

    pub fn sample_rate(&self) -> u32 {
        self.manifest.sample_rate
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig { n_classes: 3, speech_per_class: 2, noise_per_kind: 2, duration_s: 0.1, ..CorpusConfig::default() }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = Corpus::synthesize(&small()).unwrap();
        let b = Corpus::regenerate(a.manifest()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.speech().count(), 6);
        assert_eq!(a.noise().count(), 6);
    }

    #[test]
    fn write_then_load_round_trips_the_manifest() {
        let a = Corpus::synthesize(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = a.write(dir.path()).unwrap();
        let b = Corpus::load(&path).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        for (x, y) in a.items().iter().zip(b.items()) {
            let err = x.audio.samples().iter().zip(y.audio.samples()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            // Noise passes through a peak rescale, which magnifies the
            // quantization step by at most peak / NOISE_PEAK (twice: down and up).
            let step = match x.entry.kind {
                ItemKind::Speech => 2f64.powi(-15),
                ItemKind::Noise => 2f64.powi(-14) * (x.audio.peak() / NOISE_PEAK).max(1.0),
            };
            assert!(err <= step, "{}: {err}", x.entry.id);
            if x.entry.kind == ItemKind::Noise {
                assert!((y.audio.rms() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn validation_catches_label_and_id_errors() {
        let mut m = Corpus::synthesize(&small()).unwrap().manifest().clone();
        m.entries[1].id = m.entries[0].id.clone();
        assert!(m.validate().is_err());
        let mut m = Corpus::synthesize(&small()).unwrap().manifest().clone();
        m.entries[0].label = None;
        assert!(m.validate().is_err());
        let mut m = Corpus::synthesize(&small()).unwrap().manifest().clone();
        let last = m.entries.len() - 1;
        m.entries[last].label = Some(0);
        assert!(m.validate().is_err());
    }
}

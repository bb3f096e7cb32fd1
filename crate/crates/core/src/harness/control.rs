use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_ci99, HarnessError};
use crate::audio::{mix_at_snr, peak_normalize_pair, quantize_pcm16, wav_write, AudioBuffer, Mixture};
use crate::grad::ParamSet;
use crate::metrics::{postmix_control, postmix_weight, snri, SeparatedPair};
use crate::models::SnriNet;
use crate::trainer::thread_pool;

pub const RECORD_HEADER: [&str; 5] = ["method", "input_snr_db", "target_snri_db", "achieved_snri_db", "utterance_id"];
pub const SUMMARY_HEADER: [&str; 6] = ["method", "input_snr_db", "target_snri_db", "mean_db", "ci99_lo_db", "ci99_hi_db"];

/// Peak of the rescaled evaluation mixtures.
const EVAL_PEAK: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMethod {
    SnriNet,
    Postmix,
}

impl ControlMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ControlMethod::SnriNet => "snri_net",
            ControlMethod::Postmix => "postmix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: ControlMethod,
    pub input_snr_db: f64,
    pub target_snri_db: f64,
    pub achieved_snri_db: f64,
    pub utterance_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: ControlMethod,
    pub input_snr_db: f64,
    pub target_snri_db: f64,
    pub mean_db: f64,
    pub ci99_lo_db: f64,
    pub ci99_hi_db: f64,
}

/// A frontend whose output SNRi is steered by a target.
pub trait TargetEnhancer: Sync {
    fn enhance(&self, m: &Mixture, lambda_db: f64) -> Result<Vec<f64>, HarnessError>;
}

/// A frontend producing speech and noise estimates.
pub trait Separator: Sync {
    fn separate(&self, m: &Mixture) -> Result<SeparatedPair, HarnessError>;
}

pub struct SnriNetModel<'a> {
    pub net: &'a SnriNet,
    pub params: &'a ParamSet,
}

impl TargetEnhancer for SnriNetModel<'_> {
    fn enhance(&self, m: &Mixture, lambda_db: f64) -> Result<Vec<f64>, HarnessError> {
        Ok(self.net.enhance(self.params, m.x.samples(), Some(lambda_db))?.speech)
    }
}

pub struct SeparatorModel<'a> {
    pub net: &'a SnriNet,
    pub params: &'a ParamSet,
}

impl Separator for SeparatorModel<'_> {
    fn separate(&self, m: &Mixture) -> Result<SeparatedPair, HarnessError> {
        Ok(self.net.enhance(self.params, m.x.samples(), None)?)
    }
}

/// Perfect separation: returns the references themselves.
pub struct OracleSeparator;

impl Separator for OracleSeparator {
    fn separate(&self, m: &Mixture) -> Result<SeparatedPair, HarnessError> {
        Ok(SeparatedPair::new(m.s.samples().to_vec(), m.n.samples().to_vec())?)
    }
}

/// `s + 10^(−λ/20)·n`: the exact target-controlled output.
pub struct OracleEnhancer;

impl TargetEnhancer for OracleEnhancer {
    fn enhance(&self, m: &Mixture, lambda_db: f64) -> Result<Vec<f64>, HarnessError> {
        let w = postmix_weight(lambda_db);
        Ok(m.s.samples().iter().zip(m.n.samples()).map(|(s, n)| s + w * n).collect())
    }
}

fn tag(v: f64) -> String {
    format!("{v}")
}

/// Directory of the references stored for one input SNR.
pub fn reference_dir(root: &Path, input_snr_db: f64) -> PathBuf {
    root.join(format!("snr{}", tag(input_snr_db)))
}

/// Stored enhanced output of one evaluation row.
pub fn enhanced_path(root: &Path, r: &EvalRecord) -> PathBuf {
    reference_dir(root, r.input_snr_db)
        .join(r.method.name())
        .join(format!("{}_t{}.wav", r.utterance_id, tag(r.target_snri_db)))
}

/// `m` with its noise rescaled to `snr_db`. With `quantize`, speech and
/// noise are rounded to PCM16 and `x` is their exact sum.
fn at_snr(m: &Mixture, snr_db: f64, quantize: bool) -> Result<Mixture, HarnessError> {
    let (_, n) = mix_at_snr(&m.s, &m.n, snr_db)?;
    let (mut s, mut n) = peak_normalize_pair(&m.s, &n, EVAL_PEAK);
    if quantize {
        s = s.with_samples(quantize_pcm16(s.samples()))?;
        n = n.with_samples(quantize_pcm16(n.samples()))?;
    }
    let x = s.with_samples(s.samples().iter().zip(n.samples()).map(|(a, b)| a + b).collect())?;
    Ok(Mixture { id: m.id.clone(), x, s, n, label: m.label })
}

/// Runs both controllers over every (utterance, input SNR, target) cell and
/// measures the achieved SNRi. With `audio_dir`, references and outputs are
/// stored as PCM16 and the SNRi is measured on the stored samples, so every
/// row can be recomputed from disk.
pub fn eval_control(
    mixtures: &[Mixture],
    enhancer: &dyn TargetEnhancer,
    separator: &dyn Separator,
    targets_db: &[f64],
    input_snrs_db: &[f64],
    audio_dir: Option<&Path>,
) -> Result<Vec<EvalRecord>, HarnessError> {
    let units: Vec<(&Mixture, f64)> = mixtures.iter().flat_map(|m| input_snrs_db.iter().map(move |snr| (m, *snr))).collect();
    let run = |(m, snr): (&Mixture, f64)| -> Result<Vec<EvalRecord>, HarnessError> {
        let m = at_snr(m, snr, audio_dir.is_some())?;
        if let Some(root) = audio_dir {
            let dir = reference_dir(root, snr);
            fs::create_dir_all(&dir)?;
            for (suffix, buf) in [("x", &m.x), ("s", &m.s), ("n", &m.n)] {
                wav_write(&dir.join(format!("{}_{suffix}.wav", m.id)), buf)?;
            }
        }
        let pair = separator.separate(&m)?;
        let mut rows = Vec::with_capacity(2 * targets_db.len());
        for &target in targets_db {
            for method in [ControlMethod::SnriNet, ControlMethod::Postmix] {
                let y1 = match method {
                    ControlMethod::SnriNet => enhancer.enhance(&m, target)?,
                    ControlMethod::Postmix => postmix_control(&pair, target)?,
                };
                let mut record = EvalRecord {
                    method,
                    input_snr_db: snr,
                    target_snri_db: target,
                    achieved_snri_db: 0.0,
                    utterance_id: m.id.clone(),
                };
                let y1 = match audio_dir {
                    Some(root) => {
                        let stored = m.x.with_samples(quantize_pcm16(&y1))?;
                        let path = enhanced_path(root, &record);
                        fs::create_dir_all(path.parent().expect("nested path"))?;
                        wav_write(&path, &stored)?;
                        stored.into_samples()
                    }
                    None => y1,
                };
                record.achieved_snri_db = snri(m.s.samples(), m.n.samples(), &y1)?;
                rows.push(record);
            }
        }
        Ok(rows)
    };
    let pool = thread_pool()?;
    let nested = pool.install(|| units.into_par_iter().map(run).collect::<Result<Vec<_>, _>>())?;
    let mut rows: Vec<EvalRecord> = nested.into_iter().flatten().collect();
    sort_records(&mut rows);
    Ok(rows)
}

fn sort_records(rows: &mut [EvalRecord]) {
    rows.sort_by(|a, b| {
        a.method
            .name()
            .cmp(b.method.name())
            .then(a.input_snr_db.total_cmp(&b.input_snr_db))
            .then(a.target_snri_db.total_cmp(&b.target_snri_db))
            .then(a.utterance_id.cmp(&b.utterance_id))
    });
}

/// Mean and 99% interval per (method, input SNR, target) cell.
pub fn summarize(records: &[EvalRecord]) -> Vec<SummaryRow> {
    type Cell = (ControlMethod, f64, f64, Vec<f64>);
    let mut cells: BTreeMap<(&str, u64, u64), Cell> = BTreeMap::new();
    for r in records {
        // Order-preserving keys for finite floats.
        let key = |v: f64| {
            let b = v.to_bits();
            if v.is_sign_negative() { !b } else { b | (1 << 63) }
        };
        cells
            .entry((r.method.name(), key(r.input_snr_db), key(r.target_snri_db)))
            .or_insert_with(|| (r.method, r.input_snr_db, r.target_snri_db, Vec::new()))
            .3
            .push(r.achieved_snri_db);
    }
    cells
        .into_values()
        .map(|(method, input_snr_db, target_snri_db, v)| {
            let (mean_db, ci99_lo_db, ci99_hi_db) = mean_ci99(&v);
            SummaryRow { method, input_snr_db, target_snri_db, mean_db, ci99_lo_db, ci99_hi_db }
        })
        .collect()
}

pub(crate) fn write_csv_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records(path: &Path, rows: &[EvalRecord]) -> Result<(), HarnessError> {
    write_csv_rows(path, &RECORD_HEADER, rows)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    write_csv_rows(path, &SUMMARY_HEADER, rows)
}

/// Reads a CSV whose header must equal `header` exactly.
pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let found = r.headers().map_err(|e| HarnessError::SchemaMismatch(e.to_string()))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(HarnessError::SchemaMismatch(format!("header `{}`, expected `{}`", found.iter().collect::<Vec<_>>().join(","), header.join(","))));
    }
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| HarnessError::SchemaMismatch(e.to_string()))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, HarnessError> {
    read_csv(path, &RECORD_HEADER)
}

/// Achieved SNRi recomputed from the stored references and output of `r`.
pub fn recompute_from_disk(root: &Path, r: &EvalRecord) -> Result<f64, HarnessError> {
    let dir = reference_dir(root, r.input_snr_db);
    let read = |p: PathBuf| -> Result<AudioBuffer, HarnessError> { Ok(crate::audio::wav_read(&p)?) };
    let s = read(dir.join(format!("{}_s.wav", r.utterance_id)))?;
    let n = read(dir.join(format!("{}_n.wav", r.utterance_id)))?;
    let y = read(enhanced_path(root, r))?;
    Ok(snri(s.samples(), n.samples(), y.samples())?)
}

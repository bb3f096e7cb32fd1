//! RIFF/WAVE, 16-bit PCM, mono.

use std::fs;
use std::path::Path;

use super::{AudioBuffer, AudioError};

const PCM: u16 = 1;
const SCALE: f64 = 32768.0;

fn to_pcm16(v: f64) -> i16 {
    (v * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// The samples a write/read round trip would return.
pub fn quantize_pcm16(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| to_pcm16(*v) as f64 / SCALE).collect()
}

pub fn wav_write(path: &Path, audio: &AudioBuffer) -> Result<(), AudioError> {
    let data_len = audio.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate().to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for v in audio.samples() {
        out.extend_from_slice(&to_pcm16(*v).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn unsupported(msg: impl Into<String>) -> AudioError {
    AudioError::UnsupportedFormat(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn wav_read(path: &Path) -> Result<AudioBuffer, AudioError> {
    let bytes = fs::read(path)?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(unsupported("missing RIFF/WAVE header"));
    }
    let mut at = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = u32_at(bytes, at + 4) as usize;
        let body = at + 8;
        if body + size > bytes.len() {
            return Err(unsupported(format!("chunk `{}` runs past end of file", String::from_utf8_lossy(id))));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(unsupported("fmt chunk too short"));
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format.ok_or_else(|| unsupported("data chunk before fmt chunk"))?;
                if tag != PCM {
                    return Err(unsupported(format!("format tag {tag} is not PCM")));
                }
                if channels != 1 {
                    return Err(unsupported(format!("{channels} channels, only mono is supported")));
                }
                if bits != 16 {
                    return Err(unsupported(format!("{bits}-bit samples, only 16-bit is supported")));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / SCALE)
                    .collect();
                return AudioBuffer::new(samples, rate).map_err(|e| unsupported(e.to_string()));
            }
            _ => {}
        }
        // Chunks are word aligned.
        at = body + size + (size & 1);
    }
    Err(unsupported("no data chunk"))
}

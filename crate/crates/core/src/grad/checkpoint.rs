//! Versioned JSON checkpoints: `name → {shape, values}` in name order.
//!
//! Floats are written with shortest round-trip formatting, so identical
//! parameters always give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GradError, ParamSet, Tensor};

pub const CHECKPOINT_FORMAT: &str = "snri-lab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    format: String,
    version: u32,
    params: BTreeMap<String, Entry>,
}

pub fn checkpoint_bytes(params: &ParamSet) -> Vec<u8> {
    let file = File {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        params: params
            .iter()
            .map(|(k, t)| (k.clone(), Entry { shape: t.shape().to_vec(), values: t.data().to_vec() }))
            .collect(),
    };
    serde_json::to_vec(&file).expect("checkpoint serializes")
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<(), GradError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet, GradError> {
    let bytes = fs::read(path)?;
    let file: File = serde_json::from_slice(&bytes).map_err(|e| GradError::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(GradError::Checkpoint(format!("unknown format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(GradError::Checkpoint(format!("unsupported version {}", file.version)));
    }
    let mut params = ParamSet::new();
    for (name, entry) in file.params {
        params.insert(name, Tensor::new(entry.shape, entry.values)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.insert_normal("b.w", &[3, 4], 3, 1.0, &mut rng);
        p.insert_normal("a.bias", &[1, 4], 1, 0.1, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run/net-1.json");
        save_checkpoint(&path, &p).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(checkpoint_bytes(&back), fs::read(&path).unwrap());
    }

    #[test]
    fn rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        fs::write(&path, br#"{"format":"snri-lab-checkpoint","version":9,"params":{}}"#).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(GradError::Checkpoint(_))));
    }
}

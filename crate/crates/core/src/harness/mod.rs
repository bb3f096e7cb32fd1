//! Experiment harness: run configs, mixture sets, the control-accuracy and
//! predicted-target evaluations, CSV/JSON/SVG reporting.

mod checks;
mod config;
mod control;
mod lambda;
mod mixset;
mod plot;
mod stats;

pub use checks::{grad_suite, joint_gradcheck, metrics_report, miniature_example, miniature_models, GradSuiteReport, MetricsReport};
pub use config::{EvalConfig, RunConfig, SCHEMA_VERSION};
pub use control::{
    enhanced_path, eval_control, read_records, recompute_from_disk, reference_dir, summarize, write_records,
    write_summary, ControlMethod, EvalRecord, OracleEnhancer, OracleSeparator, Separator, SeparatorModel,
    SnriNetModel, SummaryRow, TargetEnhancer, RECORD_HEADER, SUMMARY_HEADER,
};
pub use lambda::{
    eval_lambda, lambda_noise_kinds, write_lambda_records, Expectation, LambdaAnalysisRecord, LambdaCell,
    LambdaReport, LAMBDA_HEADER,
};
pub use mixset::{load_mix_set, write_mix_set, MixEntry, MixIndex, MIX_INDEX};
pub use plot::{read_summary, render_svg};
pub use stats::{mean_ci99, spearman, Z99};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio::AudioError;
use crate::grad::{load_checkpoint, save_checkpoint, GradError, ParamSet};
use crate::metrics::MetricsError;
use crate::models::ModelError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config schema version {found}, expected {expected}")]
    Version { found: u64, expected: u32 },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("corpus has no speech or no noise items")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

impl HarnessError {
    /// 2 for usage and contract violations, 1 for internal failures.
    pub fn exit_code(&self) -> i32 {
        use HarnessError as H;
        match self {
            H::Config(_) | H::Version { .. } | H::SchemaMismatch(_) | H::IncompatibleCheckpoint(_) | H::EmptyCorpus => 2,
            H::Json(_) | H::Csv(_) | H::Metrics(_) => 2,
            H::Io(e) => io_code(e),
            H::Audio(AudioError::Io(e)) | H::Grad(GradError::Io(e)) => io_code(e),
            H::Audio(_) => 2,
            H::Grad(GradError::Checkpoint(_)) => 2,
            H::Model(ModelError::TooShort { .. } | ModelError::InvalidLabel { .. } | ModelError::InvalidConfig(_)) => 2,
            H::Model(ModelError::Metrics(_) | ModelError::Audio(_)) => 2,
            H::Train(TrainError::EmptyCorpus | TrainError::IncompatibleCheckpoint(_) | TrainError::InvalidConfig(_)) => 2,
            H::Train(TrainError::Model(ModelError::TooShort { .. } | ModelError::InvalidConfig(_))) => 2,
            _ => 1,
        }
    }
}

fn io_code(e: &std::io::Error) -> i32 {
    match e.kind() {
        std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => 2,
        _ => 1,
    }
}

/// `{root}/{run_id}/{network}-{step}.json`.
pub fn checkpoint_path(root: &Path, run_id: &str, network: &str, step: usize) -> PathBuf {
    root.join(run_id).join(format!("{network}-{step}.json"))
}

pub fn save_network(root: &Path, run_id: &str, network: &str, step: usize, params: &ParamSet) -> Result<PathBuf, HarnessError> {
    let path = checkpoint_path(root, run_id, network, step);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&path, params)?;
    Ok(path)
}

/// Loads and merges checkpoints; later files may not redefine a parameter.
pub fn load_networks(paths: &[PathBuf]) -> Result<ParamSet, HarnessError> {
    let mut merged = ParamSet::new();
    for path in paths {
        let p = load_checkpoint(path)?;
        if let Some(dup) = p.names().find(|n| merged.get(n).is_some()) {
            return Err(HarnessError::IncompatibleCheckpoint(format!("`{dup}` defined twice ({})", path.display())));
        }
        merged.extend(p);
    }
    Ok(merged)
}

/// Checks that `params` holds exactly the shapes `reference` has under each
/// prefix.
pub fn require_groups(params: &ParamSet, reference: &ParamSet, prefixes: &[&str]) -> Result<(), HarnessError> {
    for prefix in prefixes {
        let have = params.select(prefix);
        if have.is_empty() {
            return Err(HarnessError::IncompatibleCheckpoint(format!("no `{prefix}*` parameters loaded")));
        }
        reference
            .select(prefix)
            .check_compatible(&have)
            .map_err(|e| HarnessError::IncompatibleCheckpoint(format!("{prefix}: {e}")))?;
    }
    Ok(())
}

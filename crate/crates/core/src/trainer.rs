//! Pretraining and joint fine-tuning loops.
//!
//! Every batch is drawn fresh from the corpus with seeds derived from
//! `(run seed, stream, step, example)`, examples are differentiated in
//! parallel, and per-example gradients are summed in batch order, so runs are
//! bit-reproducible regardless of thread count.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{mix_at_snr, AudioBuffer, AudioError, Corpus, CorpusItem};
use crate::grad::{accumulate_grads, grad_norm, scale_grads, AdamConfig, AdamState, GradError, Graph, ParamGrads, ParamSet, Tensor};
use crate::models::losses::{se_loss, snri_target_loss, task_loss};
use crate::models::{group, FrontendDecision, JointInput, JointMode, JointWeights, ModelError, Models};
use crate::rng::{purpose, rng_for};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "SNRI_LAB_THREADS";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus has no speech or no noise items")]
    EmptyCorpus,
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("stop-gradient audit failed at step {step}: SNRi term reaches the predictor with norm {norm}")]
    StopGradientViolation { step: usize, norm: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Pretraining steps (SNRi-Net, conventional SE, backend).
    pub steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub finetune_lr_scale: f64,
    pub skip_frontend_prob: f64,
    pub random_lambda_prob: f64,
    /// Frontend skip probability in baseline fine-tuning.
    pub baseline_skip_prob: f64,
    pub eta: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Mixing SNR range in dB.
    pub snr_range_db: [f64; 2],
    /// Random crop length in seconds; `None` uses whole items.
    pub segment_s: Option<f64>,
    /// Stop-gradient audit period in fine-tuning steps; 0 disables it.
    pub audit_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            finetune_steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            finetune_lr_scale: 0.1,
            skip_frontend_prob: 0.05,
            random_lambda_prob: 0.25,
            baseline_skip_prob: 0.5,
            eta: 0.01,
            gamma: 0.25,
            seed: 0,
            snr_range_db: [-10.0, 30.0],
            segment_s: None,
            audit_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let probs = [
            ("skip_frontend_prob", self.skip_frontend_prob),
            ("random_lambda_prob", self.random_lambda_prob),
            ("baseline_skip_prob", self.baseline_skip_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.steps == 0 || self.finetune_steps == 0 || self.batch_size == 0 {
            return bad("steps, finetune_steps and batch_size must be at least 1".into());
        }
        let [lo, hi] = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("empty SNR range [{lo}, {hi}]"));
        }
        if !(self.learning_rate > 0.0 && self.finetune_lr_scale > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.eta >= 0.0 && self.gamma >= 0.0) {
            return bad("eta and gamma must be non-negative".into());
        }
        if let Some(seg) = self.segment_s {
            if !(seg > 0.0 && seg.is_finite()) {
                return bad(format!("segment_s = {seg} must be positive"));
            }
        }
        Ok(())
    }

    pub fn finetune_learning_rate(&self) -> f64 {
        self.learning_rate * self.finetune_lr_scale
    }
}

/// One `(x, s, n, λ)` tuple with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub x: AudioBuffer,
    pub s: AudioBuffer,
    pub n: AudioBuffer,
    pub lambda_db: Option<f64>,
    pub label: usize,
    pub input_snr_db: f64,
}

impl TrainingExample {
    fn input(&self) -> JointInput<'_> {
        JointInput { x: self.x.samples(), s: self.s.samples(), n: self.n.samples(), label: self.label }
    }
}

/// Data streams; pretraining of both frontends shares one so they see the
/// same mixtures.
mod stream {
    pub const FRONTEND: u64 = 0;
    pub const BACKEND: u64 = 1;
    pub const JOINT: u64 = 2;
}

/// Draws speech/noise pairs from a corpus and mixes them.
#[derive(Debug, Clone)]
pub struct ExampleSampler<'a> {
    speech: Vec<&'a CorpusItem>,
    noise: Vec<&'a CorpusItem>,
    segment: Option<usize>,
}

fn crop(x: &AudioBuffer, len: usize, rng: &mut ChaCha8Rng) -> Result<AudioBuffer, AudioError> {
    if x.len() <= len {
        return Ok(x.clone());
    }
    let start = rng.random_range(0..=x.len() - len);
    x.with_samples(x.samples()[start..start + len].to_vec())
}

impl<'a> ExampleSampler<'a> {
    pub fn new(corpus: &'a Corpus, segment_s: Option<f64>) -> Result<Self, TrainError> {
        let speech: Vec<_> = corpus.speech().collect();
        let noise: Vec<_> = corpus.noise().collect();
        if speech.is_empty() || noise.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let segment = segment_s.map(|s| (s * corpus.sample_rate() as f64).round() as usize);
        Ok(Self { speech, noise, segment })
    }

    /// A mixture at a uniform SNR in `snr_range`, fully determined by `rng`.
    pub fn draw(&self, rng: &mut ChaCha8Rng, snr_range: [f64; 2], id: String) -> Result<TrainingExample, TrainError> {
        let sp = self.speech[rng.random_range(0..self.speech.len())];
        let no = self.noise[rng.random_range(0..self.noise.len())];
        let snr = rng.random_range(snr_range[0]..=snr_range[1]);
        self.mix(rng, sp, no, snr, id)
    }

    pub(crate) fn mix(
        &self,
        rng: &mut ChaCha8Rng,
        sp: &CorpusItem,
        no: &CorpusItem,
        snr_db: f64,
        id: String,
    ) -> Result<TrainingExample, TrainError> {
        let len = self.segment.unwrap_or(usize::MAX).min(sp.audio.len()).min(no.audio.len());
        let s = crop(&sp.audio, len, rng)?;
        let n = crop(&no.audio, len, rng)?;
        let (x, n) = mix_at_snr(&s, &n, snr_db)?;
        let label = sp.entry.label.expect("speech items carry labels");
        Ok(TrainingExample { id, x, s, n, lambda_db: None, label, input_snr_db: snr_db })
    }

    /// `count` examples for held-out evaluation, seeded independently of any
    /// training stream.
    pub fn held_out(&self, count: usize, seed: u64, snr_range: [f64; 2]) -> Result<Vec<TrainingExample>, TrainError> {
        (0..count)
            .map(|i| self.draw(&mut rng_for(seed, &[purpose::EVAL, i as u64]), snr_range, format!("heldout-{i:05}")))
            .collect()
    }
}

pub fn draw_lambda(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..range.1)
}

/// Per-step frontend decisions for fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct Curriculum {
    pub mode: JointMode,
    pub seed: u64,
    pub skip_prob: f64,
    pub random_lambda_prob: f64,
    pub lambda_range: (f64, f64),
}

impl Curriculum {
    pub fn new(cfg: &TrainConfig, mode: JointMode, lambda_range: (f64, f64)) -> Self {
        let skip_prob = match mode {
            JointMode::Proposed => cfg.skip_frontend_prob,
            JointMode::Baseline => cfg.baseline_skip_prob,
        };
        Self { mode, seed: cfg.seed, skip_prob, random_lambda_prob: cfg.random_lambda_prob, lambda_range }
    }

    /// Decisions for every example of `step`: the branch is drawn once per
    /// step, the substitute λ once per example.
    pub fn decide(&self, step: usize, batch: usize) -> Vec<FrontendDecision> {
        let mut rng = rng_for(self.seed, &[purpose::CURRICULUM, step as u64]);
        let skip = rng.random::<f64>() < self.skip_prob;
        let random = rng.random::<f64>() < self.random_lambda_prob;
        (0..batch)
            .map(|_| {
                let lambda = draw_lambda(&mut rng, self.lambda_range);
                match (skip, self.mode, random) {
                    (true, _, _) => FrontendDecision::Skip,
                    (false, JointMode::Proposed, true) => FrontendDecision::RandomLambda(lambda),
                    _ => FrontendDecision::Frontend,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hat: Option<LambdaStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<String>,
    pub learning_rate: f64,
    pub grad_norm: f64,
    /// Norm of the SNRi term's gradient on the predictor, when audited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_norm: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// JSON-lines training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> Result<String, TrainError> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn append_to(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path)?;
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    /// Step numbers increase strictly within each phase.
    pub fn is_monotone(&self) -> bool {
        let mut last: Vec<(&str, usize)> = Vec::new();
        for r in &self.records {
            match last.iter_mut().find(|(p, _)| *p == r.phase) {
                Some((_, s)) if *s >= r.step => return false,
                Some((_, s)) => *s = r.step,
                None => last.push((&r.phase, r.step)),
            }
        }
        true
    }

    pub fn phase(&self, phase: &str) -> impl Iterator<Item = &StepRecord> {
        let phase = phase.to_string();
        self.records.iter().filter(move |r| r.phase == phase)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: RunLog,
}

/// Which frontend [`Trainer::pretrain_se`] trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeVariant {
    /// λ-conditioned SNRi-Net with the SNRi target loss.
    Snri,
    /// Unconditioned network with the conventional separation loss.
    Conventional,
}

struct ExampleOut {
    grads: ParamGrads,
    loss: f64,
    task: Option<f64>,
    aux: Option<f64>,
    lambda_hat: Option<f64>,
}

/// Worker pool honouring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool, TrainError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| TrainError::InvalidConfig(format!("thread pool: {e}")))
}

type AuditHook<'h> = dyn Fn(usize, &ParamSet) -> Result<Option<f64>, TrainError> + 'h;

/// Per-step extras for the log: a branch label and an audit run on the
/// parameters before the update.
#[derive(Default)]
struct StepHooks<'h> {
    branch: Option<&'h dyn Fn(usize) -> &'static str>,
    audit: Option<&'h AuditHook<'h>>,
}

pub struct Trainer<'a> {
    models: Models,
    cfg: TrainConfig,
    sampler: ExampleSampler<'a>,
    pool: rayon::ThreadPool,
}

fn item(g: &Graph, v: crate::grad::Var) -> f64 {
    g.value(v).item()
}

impl<'a> Trainer<'a> {
    pub fn new(models: &Models, corpus: &'a Corpus, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut models = models.clone();
        models.weights = JointWeights { eta: cfg.eta, gamma: cfg.gamma };
        Ok(Self { models, cfg, sampler: ExampleSampler::new(corpus, cfg.segment_s)?, pool: thread_pool()? })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn sampler(&self) -> &ExampleSampler<'a> {
        &self.sampler
    }

    fn example(&self, stream: u64, step: usize, i: usize) -> Result<(TrainingExample, ChaCha8Rng), TrainError> {
        let mut rng = rng_for(self.cfg.seed, &[purpose::BATCH, stream, step as u64, i as u64]);
        let ex = self.sampler.draw(&mut rng, self.cfg.snr_range_db, format!("s{stream}-{step}-{i}"))?;
        Ok((ex, rng))
    }

    /// Runs `steps` Adam steps on the parameters under `prefixes`; the rest
    /// of `params` is held fixed.
    #[allow(clippy::too_many_arguments)]
    fn optimize<F>(
        &self,
        phase: &str,
        mut params: ParamSet,
        prefixes: &[&str],
        steps: usize,
        lr: f64,
        hooks: &StepHooks<'_>,
        per_example: F,
    ) -> Result<TrainOutcome, TrainError>
    where
        F: Fn(usize, usize, &ParamSet) -> Result<ExampleOut, TrainError> + Sync,
    {
        let trainable = |name: &str| prefixes.iter().any(|p| name.starts_with(p));
        let mut adam = AdamState::new(AdamConfig::with_lr(lr));
        let mut log = RunLog::default();
        let batch = self.cfg.batch_size;
        for step in 0..steps {
            let start = Instant::now();
            let outs: Vec<Result<ExampleOut, TrainError>> =
                self.pool.install(|| (0..batch).into_par_iter().map(|i| per_example(step, i, &params)).collect());
            let mut grads = ParamGrads::new();
            let (mut loss, mut task, mut aux) = (0.0, Vec::new(), Vec::new());
            let mut lambdas = Vec::new();
            for out in outs {
                let out = out?;
                accumulate_grads(&mut grads, out.grads);
                loss += out.loss;
                task.extend(out.task);
                aux.extend(out.aux);
                lambdas.extend(out.lambda_hat);
            }
            grads.retain(|name, _| trainable(name));
            scale_grads(&mut grads, 1.0 / batch as f64);
            let loss = loss / batch as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { step, what: "loss" });
            }
            let norm = grad_norm(&grads);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite { step, what: "gradient" });
            }
            let audit_norm = match hooks.audit {
                Some(audit) => audit(step, &params)?,
                None => None,
            };
            adam.step(&mut params, &grads)?;
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            log.records.push(StepRecord {
                phase: phase.to_string(),
                step,
                loss,
                task: mean(&task),
                aux: mean(&aux),
                lambda_hat: mean(&lambdas).map(|m| LambdaStats {
                    mean: m,
                    min: lambdas.iter().copied().fold(f64::INFINITY, f64::min),
                    max: lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }),
                branch: hooks.branch.map(|f| f(step).to_string()),
                learning_rate: lr,
                grad_norm: norm,
                audit_norm,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok(TrainOutcome { params, log })
    }

    /// Pretrains a frontend from fresh initialization. SNRi-Net draws
    /// `λ ~ U(λ_min, λ_max)` per example and minimizes the SNRi target loss.
    pub fn pretrain_se(&self, variant: SeVariant) -> Result<TrainOutcome, TrainError> {
        let m = &self.models;
        let (net, phase) = match variant {
            SeVariant::Snri => (&m.snri_net, "pretrain-snri"),
            SeVariant::Conventional => (&m.se_net, "pretrain-conventional"),
        };
        let params = m.init(self.cfg.seed).select(net.prefix());
        let range = m.config.lambda_range();
        self.optimize(phase, params, &[net.prefix()], self.cfg.steps, self.cfg.learning_rate, &StepHooks::default(), |step, i, p| {
            let (ex, mut rng) = self.example(stream::FRONTEND, step, i)?;
            let lambda = draw_lambda(&mut rng, range);
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let x = g.constant(Tensor::column(ex.x.samples().to_vec()));
            let (s, n) = (ex.s.samples(), ex.n.samples());
            let loss = match variant {
                SeVariant::Snri => {
                    let l = g.constant(Tensor::full(&[1, 1], lambda));
                    let (y1, _) = net.forward(&mut g, &b, x, Some(l))?;
                    snri_target_loss(&mut g, s, n, y1, l, &m.thresholds)?.total
                }
                SeVariant::Conventional => {
                    let (y1, y2) = net.forward(&mut g, &b, x, None)?;
                    se_loss(&mut g, s, n, y1, y2, &m.thresholds)?
                }
            };
            let value = item(&g, loss);
            let mut grads = g.backward(loss)?;
            Ok(ExampleOut { grads: b.collect(&mut grads), loss: value, task: None, aux: None, lambda_hat: None })
        })
    }

    /// Pretrains the backend on an even mix of clean and noisy inputs.
    pub fn pretrain_backend(&self) -> Result<TrainOutcome, TrainError> {
        let m = &self.models;
        let params = m.init(self.cfg.seed).select(group::BACKEND);
        self.optimize("pretrain-backend", params, &[group::BACKEND], self.cfg.steps, self.cfg.learning_rate, &StepHooks::default(), |step, i, p| {
            let (ex, mut rng) = self.example(stream::BACKEND, step, i)?;
            let input = if rng.random::<bool>() { &ex.s } else { &ex.x };
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let y = g.constant(Tensor::column(input.samples().to_vec()));
            let lp = m.backend.forward(&mut g, &b, y)?;
            let loss = task_loss(&mut g, lp, ex.label)?;
            let value = item(&g, loss);
            let mut grads = g.backward(loss)?;
            Ok(ExampleOut { grads: b.collect(&mut grads), loss: value, task: Some(value), aux: None, lambda_hat: None })
        })
    }

    /// Networks trained jointly in each mode.
    pub fn joint_groups(mode: JointMode) -> &'static [&'static str] {
        match mode {
            JointMode::Proposed => &[group::SNRI_NET, group::PRED_NET, group::BACKEND],
            JointMode::Baseline => &[group::SE_NET, group::BACKEND],
        }
    }

    /// Parameters fine-tuning starts from: `start` for the pretrained
    /// networks, fresh initialization for the predictor.
    pub fn joint_start(&self, start: &ParamSet, mode: JointMode) -> Result<ParamSet, TrainError> {
        let fresh = self.models.init(self.cfg.seed);
        let mut params = ParamSet::new();
        for prefix in Self::joint_groups(mode) {
            let want = fresh.select(prefix);
            let have = start.select(prefix);
            if *prefix == group::PRED_NET && have.is_empty() {
                params.extend(want);
                continue;
            }
            want.check_compatible(&have).map_err(|e| TrainError::IncompatibleCheckpoint(format!("{prefix}: {e}")))?;
            params.extend(have);
        }
        Ok(params)
    }

    /// Joint fine-tuning at `learning_rate · finetune_lr_scale`.
    pub fn finetune_joint(&self, start: &ParamSet, mode: JointMode) -> Result<TrainOutcome, TrainError> {
        let m = &self.models;
        let params = self.joint_start(start, mode)?;
        let curriculum = Curriculum::new(&self.cfg, mode, m.config.lambda_range());
        let batch = self.cfg.batch_size;
        let lr = self.cfg.finetune_learning_rate();
        let phase = format!("finetune-{}", mode.name());
        let audit_every = self.cfg.audit_every;
        let branch = |step| match curriculum.decide(step, batch)[0] {
            FrontendDecision::Skip => "skip",
            FrontendDecision::RandomLambda(_) => "random_lambda",
            FrontendDecision::Frontend => "frontend",
        };
        let audit = |step: usize, p: &ParamSet| {
            if !step.is_multiple_of(audit_every) || curriculum.decide(step, batch)[0] != FrontendDecision::Frontend {
                return Ok(None);
            }
            self.audit(p, step).map(Some)
        };
        let hooks = StepHooks {
            branch: Some(&branch),
            audit: (mode == JointMode::Proposed && audit_every > 0).then_some(&audit as &AuditHook<'_>),
        };
        let outcome = self.optimize(&phase, params, Self::joint_groups(mode), self.cfg.finetune_steps, lr, &hooks, |step, i, p| {
            let decision = curriculum.decide(step, batch)[i];
            let (ex, _) = self.example(stream::JOINT, step, i)?;
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let terms = m.joint_terms(&mut g, &b, ex.input(), mode, decision)?;
            let out = ExampleOut {
                grads: ParamGrads::new(),
                loss: item(&g, terms.total),
                task: Some(item(&g, terms.task)),
                aux: terms.aux.map(|v| item(&g, v)),
                lambda_hat: terms.lambda_hat.map(|v| item(&g, v)),
            };
            let mut grads = g.backward(terms.total)?;
            Ok(ExampleOut { grads: b.collect(&mut grads), ..out })
        })?;

        Ok(outcome)
    }

    /// Gradient norm of the SNRi term alone on the predictor's parameters.
    pub fn audit(&self, params: &ParamSet, step: usize) -> Result<f64, TrainError> {
        let (ex, _) = self.example(stream::JOINT, step, 0)?;
        let mut g = Graph::new();
        let b = params.bind(&mut g, true);
        let terms = self.models.joint_terms(&mut g, &b, ex.input(), JointMode::Proposed, FrontendDecision::Frontend)?;
        let Some(aux) = terms.aux else { return Ok(0.0) };
        let mut grads = g.backward(aux)?;
        let grads = b.collect(&mut grads);
        let norm = grad_norm(&grads.into_iter().filter(|(k, _)| k.starts_with(group::PRED_NET)).collect());
        if norm != 0.0 {
            return Err(TrainError::StopGradientViolation { step, norm });
        }
        Ok(norm)
    }
}

/// What the backend is fed during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Clean speech.
    Clean,
    /// The unprocessed mixture.
    Raw,
    /// SNRi-Net conditioned on the predictor's λ̂.
    Proposed,
    /// The unconditioned frontend.
    Baseline,
}

/// Backend task loss and prediction for one example, without gradients.
pub fn evaluate_example(
    models: &Models,
    params: &ParamSet,
    ex: &TrainingExample,
    pipeline: Pipeline,
) -> Result<(f64, usize, Option<f64>), TrainError> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let input = match pipeline {
        Pipeline::Clean => &ex.s,
        _ => &ex.x,
    };
    let x = g.constant(Tensor::column(input.samples().to_vec()));
    let (y, lambda_hat) = match pipeline {
        Pipeline::Clean | Pipeline::Raw => (x, None),
        Pipeline::Proposed => {
            let l = models.pred_net.forward(&mut g, &b, x)?;
            (models.snri_net.forward(&mut g, &b, x, Some(l))?.0, Some(l))
        }
        Pipeline::Baseline => (models.se_net.forward(&mut g, &b, x, None)?.0, None),
    };
    let lp = models.backend.forward(&mut g, &b, y)?;
    let loss = task_loss(&mut g, lp, ex.label)?;
    let probs = g.value(lp).data();
    let predicted = (0..probs.len()).fold(0, |best, k| if probs[k] > probs[best] { k } else { best });
    Ok((item(&g, loss), predicted, lambda_hat.map(|l| item(&g, l))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_task_loss: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hat: Option<LambdaStats>,
}

/// Mean task loss and accuracy over `examples`, in parallel.
pub fn evaluate(
    models: &Models,
    params: &ParamSet,
    examples: &[TrainingExample],
    pipeline: Pipeline,
) -> Result<EvalSummary, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::InvalidConfig("no evaluation examples".into()));
    }
    let pool = thread_pool()?;
    let rows: Vec<_> = pool.install(|| {
        examples.par_iter().map(|ex| evaluate_example(models, params, ex, pipeline)).collect::<Result<Vec<_>, _>>()
    })?;
    let n = rows.len() as f64;
    let lambdas: Vec<f64> = rows.iter().filter_map(|r| r.2).collect();
    Ok(EvalSummary {
        mean_task_loss: rows.iter().map(|r| r.0).sum::<f64>() / n,
        accuracy: rows.iter().zip(examples).filter(|(r, ex)| r.1 == ex.label).count() as f64 / n,
        lambda_hat: (!lambdas.is_empty()).then(|| LambdaStats {
            mean: lambdas.iter().sum::<f64>() / lambdas.len() as f64,
            min: lambdas.iter().copied().fold(f64::INFINITY, f64::min),
            max: lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }),
    })
}

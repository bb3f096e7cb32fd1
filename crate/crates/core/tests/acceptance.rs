//! Acceptance suite: one PASS/FAIL line per criterion.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use snri_core::audio::{Corpus, CorpusConfig, MelConfig};
use snri_core::grad::{GradCheckConfig, Graph, ParamGrads};
use snri_core::harness::{
    eval_control, eval_lambda, grad_suite, lambda_noise_kinds, load_mix_set, miniature_example, miniature_models,
    save_network, spearman, summarize, write_lambda_records, write_mix_set, write_records, write_summary, ControlMethod,
    EvalConfig, SeparatorModel, SnriNetModel, SummaryRow,
};
use snri_core::metrics::{
    mixture_consistency, postmix_control, sar_decompose, snri, thresholded_snr_loss, SeparatedPair, ThresholdConfig,
};
use snri_core::models::{
    group, BackendConfig, FrontendDecision, JointInput, JointMode, JointWeights, ModelConfig, Models, PredNetConfig,
    SnriNetConfig,
};
use snri_core::trainer::{evaluate, Pipeline, SeVariant, TrainConfig, Trainer, TrainingExample};
use snri_core::{Mixture, ParamSet};

const TARGETS: [f64; 5] = [0.0, 3.0, 6.0, 9.0, 12.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, start: Instant, limit_s: Option<f64>, o: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let in_time = limit_s.is_none_or(|l| secs < l);
    let pass = o.pass && in_time;
    let limit = limit_s.map(|l| format!(" (limit {l:.0} s)")).unwrap_or_default();
    println!("criterion {id:>2} {}: {name}: {}; {secs:.2} s{limit}", if pass { "PASS" } else { "FAIL" }, o.detail);
    pass
}

fn randn(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_snri, mut worst_loss) = (0f64, 0f64);
    for _ in 0..1000 {
        let len = rng.random_range(8..512);
        let (s, n) = (randn(&mut rng, len), randn(&mut rng, len));
        let x: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
        worst_snri = worst_snri.max(snri(&s, &n, &x).unwrap().abs());
        worst_loss = worst_loss.max((thresholded_snr_loss(&s, &s, 1e-3).unwrap() + 30.0).abs());
    }
    Outcome {
        pass: worst_snri <= 1e-12 && worst_loss <= 1e-12,
        detail: format!("max |snri(s, n, s+n)| = {worst_snri:.1e}, max |loss(a, a) + 30| = {worst_loss:.1e}"),
    }
}

fn sar_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut complete, mut ortho, mut violations) = (0f64, 0f64, 0usize);
    for _ in 0..1000 {
        let len = rng.random_range(16..128);
        let (s, n, y) = (randn(&mut rng, len), randn(&mut rng, len), randn(&mut rng, len));
        let d = sar_decompose(&s, &n, &y, 1e-3).unwrap();
        let r: Vec<f64> = y.iter().zip(&s).map(|(a, b)| a - b).collect();
        let gap: Vec<f64> = (0..len).map(|i| d.e_interf[i] + d.e_artif[i] - r[i]).collect();
        complete = complete.max(norm(&gap) / norm(&r));
        let scale = norm(&d.e_artif).max(1e-300);
        ortho = ortho.max(dot(&d.e_artif, &s).abs() / (scale * norm(&s)));
        ortho = ortho.max(dot(&d.e_artif, &n).abs() / (scale * norm(&n)));
        // The projection is the closest point of span{s, n} to the residual.
        let best = norm(&d.e_artif);
        for _ in 0..1000 {
            let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let dist: f64 = (0..len).map(|i| (r[i] - a * s[i] - b * n[i]).powi(2)).sum::<f64>().sqrt();
            if dist < best * (1.0 - 1e-12) {
                violations += 1;
            }
        }
    }
    Outcome {
        pass: complete <= 1e-12 && ortho <= 1e-9 && violations == 0,
        detail: format!(
            "completeness {complete:.1e}, orthogonality {ortho:.1e}, {violations} closer subspace points of 1000000"
        ),
    }
}

fn mixture_consistency_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut sum_err, mut idem_err) = (0f64, 0f64);
    for _ in 0..1000 {
        let len = rng.random_range(8..256);
        let x = randn(&mut rng, len);
        let y = SeparatedPair::new(randn(&mut rng, len), randn(&mut rng, len)).unwrap();
        let zeta = rng.random_range(0.0..1.0);
        let once = mixture_consistency(&x, &y, zeta).unwrap();
        let twice = mixture_consistency(&x, &once, zeta).unwrap();
        for (i, xi) in x.iter().enumerate() {
            sum_err = sum_err.max((once.speech[i] + once.noise[i] - xi).abs());
            idem_err = idem_err.max((twice.speech[i] - once.speech[i]).abs()).max((twice.noise[i] - once.noise[i]).abs());
        }
    }
    Outcome {
        pass: sum_err <= 1e-12 && idem_err <= 1e-12,
        detail: format!("max sum error {sum_err:.1e}, max idempotence error {idem_err:.1e}"),
    }
}

fn postmix_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (s, n) = (randn(&mut rng, 400), randn(&mut rng, 400));
        let lambda = rng.random_range(0.0..20.0);
        let y = postmix_control(&SeparatedPair::new(s.clone(), n.clone()).unwrap(), lambda).unwrap();
        worst = worst.max((snri(&s, &n, &y).unwrap() - lambda).abs());
    }
    Outcome { pass: worst <= 1e-6, detail: format!("max |achieved − λ| = {worst:.1e} dB over 100 targets") }
}

fn gradient_suite() -> Outcome {
    let r = grad_suite(&GradCheckConfig::default()).unwrap();
    let worst = r.primitives.iter().map(|(_, c)| c.max_rel_error).fold(0f64, f64::max);
    let failed: Vec<&str> = r.primitives.iter().filter(|(_, c)| !c.passed).map(|(n, _)| n.as_str()).collect();
    Outcome {
        pass: r.passed,
        detail: format!(
            "{} primitives (worst rel error {worst:.1e}, failing {failed:?}), joint loss rel error {:.1e} over {} tensors",
            r.primitives.len(),
            r.joint.max_rel_error,
            r.joint.params.len()
        ),
    }
}

fn group_norm(g: &ParamGrads, prefix: &str) -> f64 {
    g.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.l2_norm().powi(2)).sum::<f64>().sqrt()
}

fn stop_gradient_rule() -> Outcome {
    let models = miniature_models().unwrap();
    let (x, s, n) = miniature_example();
    let (mut aux_max, mut task_min) = (0f64, f64::INFINITY);
    for seed in 0..5 {
        let p = models.init(seed);
        let term = |aux: bool| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let input = JointInput { x: &x, s: &s, n: &n, label: 1 };
            let t = models.joint_terms(&mut g, &b, input, JointMode::Proposed, FrontendDecision::Frontend).unwrap();
            let mut grads = g.backward(if aux { t.aux.unwrap() } else { t.task }).unwrap();
            b.collect(&mut grads)
        };
        aux_max = aux_max.max(group_norm(&term(true), group::PRED_NET));
        task_min = task_min.min(group_norm(&term(false), group::PRED_NET));
    }
    Outcome {
        pass: aux_max == 0.0 && task_min > 0.0,
        detail: format!("predictor gradient norm from the SNRi term {aux_max:e}, from the task term ≥ {task_min:.2e}"),
    }
}

/// Desk acceptance config: 0.25 s crops, batch 16, learning rate 3e-3.
fn desk_train() -> TrainConfig {
    TrainConfig { batch_size: 16, learning_rate: 3e-3, segment_s: Some(0.25), ..TrainConfig::default() }
}

fn desk_models() -> Models {
    Models::new(&ModelConfig::default(), ThresholdConfig::default(), JointWeights::default()).unwrap()
}

fn as_mixture(ex: &TrainingExample) -> Mixture {
    Mixture { id: ex.id.clone(), x: ex.x.clone(), s: ex.s.clone(), n: ex.n.clone(), label: ex.label }
}

fn cell(rows: &[SummaryRow], method: ControlMethod, snr: f64, target: f64) -> f64 {
    rows.iter()
        .find(|r| r.method == method && r.input_snr_db == snr && r.target_snri_db == target)
        .map(|r| r.mean_db)
        .unwrap()
}

fn control_accuracy(trainer: &Trainer, models: &Models) -> (Outcome, ParamSet) {
    let snri = trainer.pretrain_se(SeVariant::Snri).unwrap();
    let conv = trainer.pretrain_se(SeVariant::Conventional).unwrap();
    let mut params = snri.params.clone();
    params.extend(conv.params);
    let held: Vec<Mixture> = trainer.sampler().held_out(40, 99, [5.0, 5.0]).unwrap().iter().map(as_mixture).collect();
    let enhancer = SnriNetModel { net: &models.snri_net, params: &params };
    let separator = SeparatorModel { net: &models.se_net, params: &params };
    let rows = summarize(&eval_control(&held, &enhancer, &separator, &TARGETS, &[-5.0, 5.0], None).unwrap());

    let achieved: Vec<f64> = TARGETS.iter().map(|t| cell(&rows, ControlMethod::SnriNet, 5.0, *t)).collect();
    let err3 = (achieved[1] - 3.0).abs();
    let err6 = (achieved[2] - 6.0).abs();
    let rho = spearman(&TARGETS, &achieved).unwrap_or(f64::NAN);
    let over: Vec<String> = rows
        .iter()
        .filter(|r| r.method == ControlMethod::Postmix && r.mean_db > r.target_snri_db + 0.5)
        .map(|r| format!("{}@{}", r.target_snri_db, r.input_snr_db))
        .collect();
    let post: Vec<String> =
        TARGETS.iter().map(|t| format!("{:.2}", cell(&rows, ControlMethod::Postmix, 5.0, *t))).collect();
    let pass = err3 <= 2.0 && err6 <= 2.0 && rho > 0.9 && over.is_empty();
    let detail = format!(
        "at 5 dB SNRi-Net achieves {} for targets {TARGETS:?} (|err| {err3:.2}/{err6:.2} dB at 3/6, ρ = {rho:.2}); \
         postmix achieves {}, cells above target + 0.5: {over:?}",
        achieved.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join("/"),
        post.join("/")
    );
    (Outcome { pass, detail }, snri.params)
}

fn finetune_direction(trainer: &Trainer, models: &Models, snri_params: &ParamSet) -> (Outcome, ParamSet) {
    let backend = trainer.pretrain_backend().unwrap();
    let mut start = snri_params.clone();
    start.extend(backend.params);
    let initial = trainer.joint_start(&start, JointMode::Proposed).unwrap();
    let tuned = trainer.finetune_joint(&start, JointMode::Proposed).unwrap();
    let held = trainer.sampler().held_out(96, 123, trainer.config().snr_range_db).unwrap();
    let before = evaluate(models, &initial, &held, Pipeline::Proposed).unwrap();
    let after = evaluate(models, &tuned.params, &held, Pipeline::Proposed).unwrap();
    let raw = evaluate(models, &tuned.params, &held, Pipeline::Raw).unwrap();
    let (lo, hi) = models.config.lambda_range();
    let mut lambdas: Vec<(f64, f64)> = tuned.log.records.iter().filter_map(|r| r.lambda_hat).map(|l| (l.min, l.max)).collect();
    lambdas.extend([before.lambda_hat, after.lambda_hat].iter().flatten().map(|l| (l.min, l.max)));
    let in_range = lambdas.iter().all(|(a, b)| *a >= lo && *b <= hi);
    let (seen_lo, seen_hi) = lambdas.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (x, y)| (a.min(*x), b.max(*y)));
    let pass = after.mean_task_loss < before.mean_task_loss && in_range;
    let detail = format!(
        "held-out task loss {:.4} → {:.4} (accuracy {:.3} → {:.3}; raw backend {:.4}), λ̂ seen in [{seen_lo:.2}, {seen_hi:.2}] ⊆ [{lo}, {hi}]: {in_range}",
        before.mean_task_loss, after.mean_task_loss, before.accuracy, after.accuracy, raw.mean_task_loss
    );
    (Outcome { pass, detail }, tuned.params)
}

fn lambda_analysis(trainer: &Trainer, models: &Models, params: &ParamSet) -> Outcome {
    let eval = EvalConfig::default();
    let held: Vec<Mixture> = trainer.sampler().held_out(24, 7, [5.0, 5.0]).unwrap().iter().map(as_mixture).collect();
    let (_, rep) = eval_lambda(&held, models, params, &lambda_noise_kinds(&eval), &eval.input_snrs_db, eval.seed).unwrap();
    for c in &rep.cells {
        println!("    {:<6} {:>5.1} dB: mean λ̂ {:.2} dB", c.noise_kind, c.input_snr_db, c.mean_lambda_hat_db);
    }
    for e in &rep.expectations {
        println!("    [{}] {}", if e.holds { "holds" } else { "FLAG" }, e.description);
    }
    let flagged = rep.expectations.iter().filter(|e| !e.holds).count();
    Outcome {
        pass: rep.all_in_range && rep.cells.len() == 6,
        detail: format!(
            "{} cells reported, all λ̂ in range: {}, {flagged} of {} soft expectations flagged",
            rep.cells.len(),
            rep.all_in_range,
            rep.expectations.len()
        ),
    }
}

fn hash_tree(dir: &Path) -> Vec<(String, String)> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, out)
            } else {
                out.push(p)
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, &mut files);
    files.sort();
    files
        .iter()
        // Step logs carry wall-clock timings.
        .filter(|p| !p.to_string_lossy().ends_with(".jsonl"))
        .map(|p| {
            let digest = Sha256::digest(fs::read(p).unwrap());
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            (p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), hex)
        })
        .collect()
}

/// Every training and evaluation step on a small configuration, written to `dir`.
fn small_run(dir: &Path) {
    let corpus = Corpus::synthesize(&CorpusConfig {
        n_classes: 3,
        speech_per_class: 3,
        noise_per_kind: 2,
        duration_s: 0.25,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        mel: MelConfig::default(),
        snri_net: SnriNetConfig { encoder_basis: 16, bottleneck: 12, n_blocks: 1, hidden: 8, ..Default::default() },
        pred_net: PredNetConfig { n_blocks: 1, hidden: 8, ..Default::default() },
        backend: BackendConfig { n_classes: 3, n_blocks: 1, hidden: 8 },
    };
    let models = Models::new(&cfg, ThresholdConfig::default(), JointWeights::default()).unwrap();
    let train = TrainConfig { steps: 8, finetune_steps: 6, batch_size: 4, audit_every: 2, ..TrainConfig::default() };
    let trainer = Trainer::new(&models, &corpus, train).unwrap();
    let ck = dir.join("ck");
    let mut params = ParamSet::new();
    for (name, out) in [
        ("snri_net", trainer.pretrain_se(SeVariant::Snri).unwrap()),
        ("se_net", trainer.pretrain_se(SeVariant::Conventional).unwrap()),
        ("backend", trainer.pretrain_backend().unwrap()),
    ] {
        save_network(&ck, "r", name, 8, &out.params).unwrap();
        out.log.append_to(&ck.join(format!("{name}.log.jsonl"))).unwrap();
        params.extend(out.params);
    }
    for mode in [JointMode::Proposed, JointMode::Baseline] {
        let out = trainer.finetune_joint(&params, mode).unwrap();
        save_network(&ck, "r", &format!("joint_{}", mode.name()), 6, &out.params).unwrap();
        if mode == JointMode::Proposed {
            params.extend(out.params.select(group::PRED_NET));
        }
    }
    let mix = dir.join("mix");
    write_mix_set(&corpus, &mix, 4, [-5.0, 20.0], 1).unwrap();
    let (_, mixtures) = load_mix_set(&mix).unwrap();
    let enhancer = SnriNetModel { net: &models.snri_net, params: &params };
    let separator = SeparatorModel { net: &models.se_net, params: &params };
    let rows = eval_control(&mixtures, &enhancer, &separator, &[3.0, 9.0], &[-5.0, 5.0], Some(&dir.join("audio"))).unwrap();
    write_records(&dir.join("control.csv"), &rows).unwrap();
    write_summary(&dir.join("summary.csv"), &summarize(&rows)).unwrap();
    let eval = EvalConfig::default();
    let (lrows, _) = eval_lambda(&mixtures, &models, &params, &lambda_noise_kinds(&eval), &[-5.0, 5.0], 1).unwrap();
    write_lambda_records(&dir.join("lambda.csv"), &lrows).unwrap();
}

fn reproducibility() -> Outcome {
    let runs: Vec<Vec<(String, String)>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            small_run(dir.path());
            hash_tree(dir.path())
        })
        .collect();
    let differing: Vec<&str> =
        runs[0].iter().zip(&runs[1]).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
    let pass = runs[0].len() == runs[1].len() && differing.is_empty() && !runs[0].is_empty();
    Outcome {
        pass,
        detail: format!("{} checkpoint, WAV and CSV files hashed per run, {} differ {differing:?}", runs[0].len(), differing.len()),
    }
}

fn main() -> ExitCode {
    let mut all = true;
    let t = Instant::now();
    all &= report(1, "metric oracles", t, Some(1.0), metric_oracles());
    let t = Instant::now();
    all &= report(2, "SAR decomposition", t, Some(5.0), sar_decomposition());
    let t = Instant::now();
    all &= report(3, "mixture consistency", t, Some(1.0), mixture_consistency_suite());
    let t = Instant::now();
    all &= report(4, "post-mixing algebra", t, Some(1.0), postmix_algebra());
    let t = Instant::now();
    all &= report(5, "gradient suite", t, Some(60.0), gradient_suite());
    let t = Instant::now();
    all &= report(6, "stop-gradient rule", t, Some(10.0), stop_gradient_rule());

    let corpus = Corpus::synthesize(&CorpusConfig::default()).unwrap();
    let models = desk_models();
    let trainer = Trainer::new(&models, &corpus, desk_train()).unwrap();
    let t = Instant::now();
    let (outcome, snri_params) = control_accuracy(&trainer, &models);
    all &= report(7, "control accuracy", t, Some(1800.0), outcome);
    let t = Instant::now();
    let (outcome, joint) = finetune_direction(&trainer, &models, &snri_params);
    all &= report(8, "joint fine-tune direction", t, Some(1200.0), outcome);
    let t = Instant::now();
    all &= report(9, "predicted-target analysis", t, None, lambda_analysis(&trainer, &models, &joint));
    let t = Instant::now();
    all &= report(10, "reproducibility", t, None, reproducibility());

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

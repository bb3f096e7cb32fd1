//! `snri-lab`: corpus and mixture generation, training, evaluation and
//! reporting for SNRi-target speech enhancement.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use snri_core::audio::{wav_read, Corpus};
use snri_core::grad::GradCheckConfig;
use snri_core::harness::{
    eval_control, eval_lambda, grad_suite, lambda_noise_kinds, load_mix_set, load_networks, metrics_report,
    render_svg, read_summary, require_groups, save_network, summarize, write_lambda_records, write_mix_set,
    write_records, write_summary, HarnessError, RunConfig, SeparatorModel, SnriNetModel,
};
use snri_core::models::{group, JointMode};
use snri_core::trainer::{RunLog, SeVariant, Trainer};

#[derive(Parser)]
#[command(name = "snri-lab", version, about = "SNRi-target speech enhancement experiments")]
struct Cli {
    /// Run config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and evaluation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CorpusArg {
    /// Corpus manifest; without it the configured synthetic corpus is rendered.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Proposed,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Snri,
    Conventional,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus and its manifest.
    Corpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write mixtures of corpus speech and noise as WAV triples plus an index.
    Mix {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// SNR range as `lo,hi` in dB.
        #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
        snr_range: Option<[f64; 2]>,
    },
    /// Pretrain SNRi-Net or the conventional enhancer.
    PretrainSe {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, value_enum, default_value = "snri")]
        variant: Variant,
        /// Checkpoint root; files go to `{out}/{run_id}/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the classification backend on clean and noisy speech.
    PretrainBackend {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly fine-tune frontend, predictor and backend.
    FinetuneJoint {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Pretrained checkpoints; may be repeated.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "proposed")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Achieved SNRi of SNRi-Net and of post-mixing over targets and input SNRs.
    EvalControl {
        /// Mixture directory written by `mix`.
        #[arg(long)]
        mixtures: PathBuf,
        /// SNRi-Net and conventional enhancer checkpoints.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        targets: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        input_snrs: Option<Vec<f64>>,
        /// Per-utterance CSV.
        #[arg(long)]
        out: PathBuf,
        /// Summary CSV; defaults to `{out}` with a `.summary.csv` suffix.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Store references and outputs as WAV here.
        #[arg(long)]
        audio_dir: Option<PathBuf>,
    },
    /// Predicted targets for white, band-limited and tonal noise.
    EvalLambda {
        #[arg(long)]
        mixtures: PathBuf,
        /// Joint checkpoint.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        input_snrs: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
        /// Report JSON; defaults to `{out}` with a `.report.json` suffix.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print SNR, SNRi, SAR and losses of an enhanced file as JSON.
    Metrics {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        #[arg(long)]
        enhanced: PathBuf,
        /// Target SNRi of the SNRi loss, in dB.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        target: f64,
    },
    /// Render a summary CSV as an SVG chart.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive and the joint loss.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_range(v: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = v.split(',').collect();
    let [lo, hi] = parts.as_slice() else {
        return Err("expected `lo,hi`".into());
    };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    Ok([num(lo)?, num(hi)?])
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn load_corpus(arg: &CorpusArg, cfg: &RunConfig) -> Result<Corpus, HarnessError> {
    Ok(match &arg.manifest {
        Some(m) => Corpus::load(m)?,
        None => Corpus::synthesize(&cfg.corpus)?,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_log(root: &Path, run_id: &str, name: &str, log: &RunLog) -> Result<PathBuf, HarnessError> {
    let path = root.join(run_id).join(format!("{name}.log.jsonl"));
    if path.exists() {
        fs::remove_file(&path)?;
    }
    log.append_to(&path)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    let models = cfg.models()?;
    match cli.command {
        Command::Corpus { out } => {
            let manifest = Corpus::synthesize(&cfg.corpus)?.write(&out)?;
            println!("{}", manifest.display());
        }
        Command::Mix { corpus, out, count, snr_range } => {
            let corpus = load_corpus(&corpus, &cfg)?;
            let range = snr_range.unwrap_or(cfg.eval.mix_snr_range_db);
            let index = write_mix_set(&corpus, &out, count.unwrap_or(cfg.eval.mixtures), range, cfg.eval.seed)?;
            println!("{} mixtures in {}", index.entries.len(), out.display());
        }
        Command::PretrainSe { corpus, variant, out } => {
            let corpus = load_corpus(&corpus, &cfg)?;
            let trainer = Trainer::new(&models, &corpus, cfg.train)?;
            let (variant, network) = match variant {
                Variant::Snri => (SeVariant::Snri, "snri_net"),
                Variant::Conventional => (SeVariant::Conventional, "se_net"),
            };
            let result = trainer.pretrain_se(variant)?;
            write_log(&out, &cfg.run_id, network, &result.log)?;
            let path = save_network(&out, &cfg.run_id, network, cfg.train.steps, &result.params)?;
            println!("{}", path.display());
        }
        Command::PretrainBackend { corpus, out } => {
            let corpus = load_corpus(&corpus, &cfg)?;
            let result = Trainer::new(&models, &corpus, cfg.train)?.pretrain_backend()?;
            write_log(&out, &cfg.run_id, "backend", &result.log)?;
            let path = save_network(&out, &cfg.run_id, "backend", cfg.train.steps, &result.params)?;
            println!("{}", path.display());
        }
        Command::FinetuneJoint { corpus, ckpt, mode, out } => {
            let corpus = load_corpus(&corpus, &cfg)?;
            let start = load_networks(&ckpt)?;
            let mode = match mode {
                Mode::Proposed => JointMode::Proposed,
                Mode::Baseline => JointMode::Baseline,
            };
            let result = Trainer::new(&models, &corpus, cfg.train)?.finetune_joint(&start, mode)?;
            let network = format!("joint_{}", mode.name());
            write_log(&out, &cfg.run_id, &network, &result.log)?;
            let path = save_network(&out, &cfg.run_id, &network, cfg.train.finetune_steps, &result.params)?;
            println!("{}", path.display());
        }
        Command::EvalControl { mixtures, ckpt, targets, input_snrs, out, summary, audio_dir } => {
            let params = load_networks(&ckpt)?;
            require_groups(&params, &models.init(0), &[group::SNRI_NET, group::SE_NET])?;
            let (_, mixtures) = load_mix_set(&mixtures)?;
            let targets = targets.unwrap_or_else(|| cfg.eval.targets_db.clone());
            let snrs = input_snrs.unwrap_or_else(|| cfg.eval.input_snrs_db.clone());
            let enhancer = SnriNetModel { net: &models.snri_net, params: &params };
            let separator = SeparatorModel { net: &models.se_net, params: &params };
            let rows = eval_control(&mixtures, &enhancer, &separator, &targets, &snrs, audio_dir.as_deref())?;
            write_records(&out, &rows)?;
            let summary_path = summary.unwrap_or_else(|| with_suffix(&out, ".summary.csv"));
            write_summary(&summary_path, &summarize(&rows))?;
            println!("{}\n{}", out.display(), summary_path.display());
        }
        Command::EvalLambda { mixtures, ckpt, input_snrs, out, report } => {
            let params = load_networks(&ckpt)?;
            require_groups(&params, &models.init(0), &[group::SNRI_NET, group::PRED_NET])?;
            let (_, mixtures) = load_mix_set(&mixtures)?;
            let snrs = input_snrs.unwrap_or_else(|| cfg.eval.input_snrs_db.clone());
            let kinds = lambda_noise_kinds(&cfg.eval);
            let (rows, rep) = eval_lambda(&mixtures, &models, &params, &kinds, &snrs, cfg.eval.seed)?;
            write_lambda_records(&out, &rows)?;
            let report_path = report.unwrap_or_else(|| with_suffix(&out, ".report.json"));
            write_json(&report_path, &rep)?;
            for e in &rep.expectations {
                println!("[{}] {}", if e.holds { "holds" } else { "FLAG" }, e.description);
            }
        }
        Command::Metrics { clean, noise, enhanced, target } => {
            let (s, n, y) = (wav_read(&clean)?, wav_read(&noise)?, wav_read(&enhanced)?);
            let report = metrics_report(s.samples(), n.samples(), y.samples(), target, &cfg.thresholds)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Plot { input, out } => {
            let svg = render_svg(&read_summary(&input)?);
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, svg)?;
        }
        Command::Gradcheck { out } => {
            let report = grad_suite(&GradCheckConfig::default())?;
            for (name, r) in &report.primitives {
                println!("{:<18} max rel error {:.2e} {}", name, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
            }
            let j = &report.joint;
            println!("{:<18} max rel error {:.2e} {}", "joint_loss", j.max_rel_error, if j.passed { "ok" } else { "FAIL" });
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            if !report.passed {
                return Err(HarnessError::Grad(snri_core::GradError::NonFiniteValue("gradient check failed".into())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

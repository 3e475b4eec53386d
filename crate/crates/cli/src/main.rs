//! `ctkt` command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 corrupt data (checksum or format).

mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use ctkt::checkpoint;
use ctkt::config::ExperimentConfig;
use ctkt::synthdata::{self, corpus_stats, generate_split, load_corpus, Corpus, Split};
use ctkt::teacher::{Directionality, TeacherLM};
use ctkt::trainer::{self, DecodeMode, EvalContext};
use ctkt::verify::{run_all, VerifyOptions};

use report::{MetricsLine, RunSummary};

#[derive(Parser)]
#[command(name = "ctkt", version, about = "CTC training with language-model knowledge transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by a config file.
    GenData { config: PathBuf },
    /// Build (and lightly fit) the frozen teachers for a config.
    BuildTeacher { config: PathBuf },
    /// Train the configured variant; writes checkpoints and metrics.
    Train { config: PathBuf },
    /// Decode a split with a trained checkpoint and report CER.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Prefix beam search with this beam size (greedy when absent).
        #[arg(long)]
        beam: Option<usize>,
        /// Shallow-fusion weight of the causal teacher LM.
        #[arg(long)]
        lm_weight: Option<f64>,
        /// Rescore the n-best list with the joint-classification head.
        #[arg(long)]
        joint_gamma: Option<f64>,
        /// Per-utterance results (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle, gradient, alignment, masking and decoder suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately break the CTC gradient (checks that the suite notices).
        #[arg(long, hide = true)]
        inject_ctc_sign_error: bool,
    },
    /// Compare training runs from their metrics files.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Text table path; the CSV goes next to it.
        #[arg(long, default_value = "report.txt")]
        out: PathBuf,
    },
    /// Print a config file with every default filled in.
    Defaults {
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub(crate) fn fail(code: u8, message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Exit { code, message: message.into() })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(exit) = cause.downcast_ref::<Exit>() {
            return exit.code;
        }
        if let Some(e) = cause.downcast_ref::<ctkt::Error>() {
            return match e {
                ctkt::Error::Checksum { .. } | ctkt::Error::Format(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config } => gen_data(&config),
        Command::BuildTeacher { config } => build_teachers(&config).map(|_| ()),
        Command::Train { config } => train(&config),
        Command::Eval { checkpoint, config, split, beam, lm_weight, joint_gamma, out } => {
            eval(&checkpoint, &config, &split, beam, lm_weight, joint_gamma, out)
        }
        Command::Verify { seed, inject_ctc_sign_error } => verify(seed, inject_ctc_sign_error),
        Command::Report { metrics, out } => report::run(&metrics, &out),
        Command::Defaults { output_dir } => {
            print!("{}", ExperimentConfig::defaults(output_dir).serialize());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let msg = format!("{e:#}");
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn corpus_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("corpus")
}

fn teacher_path(cfg: &ExperimentConfig, d: Directionality) -> PathBuf {
    cfg.output_dir.join(format!("teacher-{d}.ckpt"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    checkpoint::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = corpus_dir(&cfg);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut counts = Vec::new();
    for split in Split::ALL {
        let utts = generate_split(&cfg.corpus, split)?;
        let mut bin = Vec::new();
        synthdata::write_split(&mut bin, cfg.corpus.d_in, &utts)?;
        write_file(&synthdata::split_path(&dir, split), &bin)?;
        let mut manifest = Vec::new();
        synthdata::write_manifest(&mut manifest, split, &utts)?;
        write_file(&synthdata::manifest_path(&dir, split), &manifest)?;
        if !utts.is_empty() {
            let stats = corpus_stats(&utts, cfg.corpus.vocab_size)?;
            let stats_json = serde_json::to_vec_pretty(&stats)?;
            write_file(&dir.join(format!("{}.stats.json", split.as_str())), &stats_json)?;
            println!(
                "{}: utterances={} tokens={} frames={} mean_tokens={:.2}",
                split.as_str(),
                stats.utterances,
                stats.tokens,
                stats.frames,
                stats.tokens as f64 / stats.utterances as f64
            );
        }
        counts.push(format!("{}={}", split.as_str(), utts.len()));
    }
    println!("corpus {} in {}", counts.join(" "), dir.display());
    Ok(())
}

fn read_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let dir = corpus_dir(cfg);
    if !synthdata::split_path(&dir, Split::Train).exists() {
        return Err(fail(2, format!("no corpus in {} (run gen-data first)", dir.display())));
    }
    let corpus = load_corpus(&dir).with_context(|| format!("loading corpus from {}", dir.display()))?;
    if corpus.d_in != cfg.corpus.d_in {
        bail!(ctkt::Error::Config(format!(
            "corpus has d_in {}, config says {}",
            corpus.d_in, cfg.corpus.d_in
        )));
    }
    Ok(corpus)
}

/// Directionalities needed by the configured run: the variant's teacher and
/// the causal fusion LM.
fn needed_teachers(cfg: &ExperimentConfig) -> Vec<Directionality> {
    let mut out = vec![Directionality::Unidirectional];
    if cfg.train.variant != ctkt::model::Variant::Vanilla {
        let d = cfg.variant_directionality();
        if !out.contains(&d) {
            out.push(d);
        }
    }
    out
}

fn build_teachers(config: &Path) -> Result<Vec<TeacherLM>> {
    let cfg = load_config(config)?;
    let corpus = read_corpus(&cfg)?;
    let mut out = Vec::new();
    for d in needed_teachers(&cfg) {
        let teacher = cfg.build_teacher(d, &corpus)?;
        let path = teacher_path(&cfg, d);
        checkpoint::save(&path, teacher.params()).with_context(|| format!("writing {}", path.display()))?;
        println!("teacher {d}: checksum {:016x} -> {}", teacher.checksum(), path.display());
        out.push(teacher);
    }
    Ok(out)
}

/// Loads a saved teacher, or builds it deterministically when absent.
fn obtain_teacher(cfg: &ExperimentConfig, d: Directionality, corpus: &Corpus) -> Result<TeacherLM> {
    let path = teacher_path(cfg, d);
    if path.exists() {
        let params = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok(TeacherLM::from_parts(cfg.teacher_config(d), params)?)
    } else {
        Ok(cfg.build_teacher(d, corpus)?)
    }
}

fn train(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let variant = cfg.train.variant;
    let corpus = read_corpus(&cfg)?;
    let teacher = match variant {
        ctkt::model::Variant::Vanilla => None,
        _ => {
            let d = cfg.variant_directionality();
            let t = obtain_teacher(&cfg, d, &corpus)?;
            trainer::check_teacher(variant, &t, &cfg.train.model)
                .map_err(|e| fail(2, format!("variant {variant} with a {d} teacher: {e}")))?;
            Some(t)
        }
    };
    let before = teacher.as_ref().map(TeacherLM::checksum);
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut lines: Vec<String> = Vec::new();
    let outcome = trainer::train_experiment(&cfg.train, &corpus, teacher.as_ref(), |record, params| {
        let ckpt = dir.join(format!("epoch-{:03}.ckpt", record.epoch));
        checkpoint::save(&ckpt, params)?;
        let line = serde_json::to_string(&MetricsLine::Epoch(record.clone()));
        lines.push(line.map_err(|e| ctkt::Error::Internal(e.to_string()))?);
        checkpoint::write_atomic(&metrics_path, (lines.join("\n") + "\n").as_bytes())?;
        println!(
            "epoch {:>3}  loss {:.4}  dev CER {:.4}  fwd {:.4}s bwd {:.4}s /iter",
            record.epoch, record.train.l_mtl, record.dev_cer, record.forward_secs_per_iter, record.backward_secs_per_iter
        );
        Ok(())
    })?;
    if teacher.as_ref().map(TeacherLM::checksum) != before {
        bail!("teacher parameters changed during training");
    }
    let model_path = dir.join("model.ckpt");
    checkpoint::save(&model_path, &outcome.params)?;

    let lm = obtain_teacher(&cfg, Directionality::Unidirectional, &corpus)?;
    let ctx = EvalContext { params: &outcome.params, model: &cfg.train.model, lm: Some(&lm), cl_teacher: None };
    let beam = DecodeMode::Beam { size: cfg.decode.beam, lm_weight: cfg.decode.lm_weight };
    let dev = trainer::evaluate(&ctx, &corpus.dev, DecodeMode::Greedy)?;
    let test = trainer::evaluate(&ctx, &corpus.test, DecodeMode::Greedy)?;
    let dev_lm = trainer::evaluate(&ctx, &corpus.dev, beam)?;
    let test_lm = trainer::evaluate(&ctx, &corpus.test, beam)?;
    let summary = RunSummary::new(&cfg, &outcome.history, &outcome.averaged_epochs, [dev.cer, test.cer, dev_lm.cer, test_lm.cer], outcome.params.checksum());
    lines.push(serde_json::to_string(&MetricsLine::Summary(summary))?);
    write_file(&metrics_path, (lines.join("\n") + "\n").as_bytes())?;
    println!(
        "averaged epochs {:?} -> {} (checksum {:016x})",
        outcome.averaged_epochs,
        model_path.display(),
        outcome.params.checksum()
    );
    println!(
        "dev CER {:.4} / {:.4} with LM; test CER {:.4} / {:.4} with LM",
        dev.cer, dev_lm.cer, test.cer, test_lm.cer
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    ckpt: &Path,
    config: &Path,
    split: &str,
    beam: Option<usize>,
    lm_weight: Option<f64>,
    joint_gamma: Option<f64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let split: Split = split.parse().map_err(|e: ctkt::Error| anyhow!(e))?;
    let params = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let corpus = read_corpus(&cfg)?;
    let lm_weight = lm_weight.unwrap_or(0.0);
    let size = beam.unwrap_or(cfg.decode.beam);
    let mode = match (joint_gamma, beam) {
        (Some(gamma), _) => DecodeMode::Joint { size, lm_weight, gamma },
        (None, Some(size)) => DecodeMode::Beam { size, lm_weight },
        (None, None) if lm_weight > 0.0 => DecodeMode::Beam { size, lm_weight },
        (None, None) => DecodeMode::Greedy,
    };
    let needs_lm = lm_weight > 0.0;
    let lm = if needs_lm || joint_gamma.is_some() {
        Some(obtain_teacher(&cfg, Directionality::Unidirectional, &corpus)?)
    } else {
        None
    };
    let ctx = EvalContext {
        params: &params,
        model: &cfg.train.model,
        lm: lm.as_ref().filter(|_| needs_lm),
        cl_teacher: lm.as_ref().filter(|_| joint_gamma.is_some()),
    };
    let report = trainer::evaluate(&ctx, corpus.split(split), mode)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join(format!("eval-{}.jsonl", split.as_str())));
    let mut body = Vec::new();
    for u in &report.utterances {
        serde_json::to_writer(&mut body, u)?;
        body.push(b'\n');
    }
    write_file(&out, &body)?;
    println!(
        "{} CER {:.4} ({} errors / {} tokens, {} utterances) -> {}",
        split.as_str(),
        report.cer,
        report.errors,
        report.ref_tokens,
        report.utterances.len(),
        out.display()
    );
    Ok(())
}

fn verify(seed: u64, inject: bool) -> Result<()> {
    let report = run_all(&VerifyOptions { seed, inject_ctc_sign_error: inject });
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "verify seed {seed} (case seeds derive from (seed, suite, case))")?;
    for s in &report.suites {
        writeln!(
            w,
            "{:<18} {:>4}/{:<4} {}  {:.2}s",
            s.name,
            s.passed,
            s.total,
            if s.ok() { "pass" } else { "FAIL" },
            s.secs
        )?;
    }
    if let Some(f) = report.suites.iter().find_map(|s| s.first_failure.as_ref().map(|f| (s.name, f))) {
        writeln!(w, "first failure in {}: {}", f.0, serde_json::to_string(f.1)?)?;
        return Err(fail(1, ""));
    }
    writeln!(w, "all suites passed")?;
    Ok(())
}

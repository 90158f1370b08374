//! `gazediff` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gazediff::conditioning::{FeatureDir, FeatureSource, TaskVocabulary};
use gazediff::denoiser::Denoiser;
use gazediff::diffusion::{gradient_suite, sample_many, sqrt_schedule, SCHEDULE_OFFSET};
use gazediff::gaze::{read_corpus, write_corpus, CorpusRecord};
use gazediff::metrics::segmap::read_segmap;
use gazediff::metrics::{evaluate, EvalConfig};
use gazediff::numerics::{Checkpoint, RngKey};
use gazediff::training::{build_items, generate_synthetic_corpus, split_records, SyntheticTaskSpec, TrainConfig, Trainer};
use gazediff::Error;

/// JSON schema of the `eval` report.
const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");
/// Checkpoint picked when `--ckpt` names a training output directory.
const LAST_CHECKPOINT: &str = "last.sdkp";

#[derive(Parser)]
#[command(name = "gazediff", version, about = "Diffusion scanpath generation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on a JSON-lines corpus.
    Train(TrainArgs),
    /// Generate scanpaths from a checkpoint.
    Sample(SampleArgs),
    /// Compare generated scanpaths with human ones.
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus with features and segmentation maps.
    Synth(SynthArgs),
    /// Print the JSON schema of the eval report.
    Schema,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Derive task vectors without a feature file from this seed.
    #[arg(long)]
    vocab_seed: Option<u64>,
}

#[derive(clap::Args)]
struct SampleArgs {
    /// Checkpoint file, or a training output directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Stimulus id; repeat for several stimuli.
    #[arg(long, required = true)]
    stimulus: Vec<String>,
    /// Task string; empty for free viewing.
    #[arg(long, default_value = "")]
    task: String,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Stimulus width written to the output records.
    #[arg(long, default_value_t = 512)]
    width: u32,
    #[arg(long, default_value_t = 512)]
    height: u32,
    #[arg(long)]
    vocab_seed: Option<u64>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    gen: PathBuf,
    #[arg(long)]
    human: PathBuf,
    /// Directory of `<stimulus_id>.sdsg` maps; SemSS is skipped without it.
    #[arg(long)]
    segmaps: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    /// Metric settings as JSON; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rss_threshold: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Overfit,
    TwoMode,
    VariableLength,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn features(root: &Path, vocab: Option<(usize, u64)>) -> FeatureDir {
    let mut dir = FeatureDir::new(root);
    dir.vocabulary = vocab.map(|(dim, seed)| TaskVocabulary::new(dim, seed));
    dir
}

fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let records = read_corpus(&a.corpus)?;
    let (train_recs, val_recs) = split_records(&records, config.validation_fraction, config.seed);
    let resume = a.resume.as_deref().map(|p| Ok::<_, Error>((Checkpoint::load(p)?, p))).transpose()?;
    // Task widths come from the files; the vocabulary fallback needs one.
    let task_dim = match &resume {
        Some((ckpt, p)) => Denoiser::from_checkpoint(ckpt, p)?.config.task_dim,
        None => a.vocab_seed.map_or(Ok(0), |_| probe_task_dim(&a.features, &records))?,
    };
    let fdir = features(&a.features, a.vocab_seed.map(|s| (task_dim, s)));
    let train = build_items(&train_recs, &fdir, config.max_len)?;
    let val = if val_recs.is_empty() {
        Vec::new()
    } else {
        build_items(&val_recs, &fdir, config.max_len)?
    };
    log::info!("{} training and {} validation scanpaths", train.len(), val.len());
    let mut trainer = match resume {
        Some((ckpt, p)) => Trainer::resume(&ckpt, p, config, train, val)?,
        None => Trainer::new(config, train, val)?,
    };
    log::info!("{} parameters, starting at step {}", trainer.model.num_parameters(), trainer.step);
    let summary = trainer.run(Some(&a.out))?;
    if let Some(v) = summary.last_val_rec() {
        log::info!("finished at step {} with validation rec {v:.6}", summary.final_step);
    }
    Ok(())
}

/// Width of the first task file present for the corpus, or the visual width.
fn probe_task_dim(root: &Path, records: &[CorpusRecord]) -> Result<usize, Error> {
    let strict = FeatureDir::new(root);
    for r in records {
        if strict.task_path(&r.task).exists() {
            return Ok(strict.task(&r.task)?.vector.len());
        }
    }
    let first = records.first().ok_or(Error::InsufficientScanpaths { needed: 1, got: 0 })?;
    Ok(strict.visual(&first.stimulus_id)?.dim())
}

fn load_model(path: &Path) -> Result<Denoiser> {
    let path = if path.is_dir() { path.join(LAST_CHECKPOINT) } else { path.to_path_buf() };
    let ckpt = Checkpoint::load(&path)?;
    Ok(Denoiser::from_checkpoint(&ckpt, &path)?)
}

fn sample(a: SampleArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let fdir = features(&a.features, a.vocab_seed.map(|s| (model.config.task_dim, s)));
    let schedule = sqrt_schedule(model.config.steps, SCHEDULE_OFFSET)?;
    let task = fdir.task(&a.task)?;
    let mut records = Vec::with_capacity(a.n * a.stimulus.len());
    for stim in &a.stimulus {
        let cond = model.joint_conditioning(&fdir.visual(stim)?, &task)?;
        let key = RngKey::new(a.seed).fork("sample").fork(stim).fork(&a.task);
        let paths = sample_many(&model, &cond, &schedule, key, a.n, stim, &a.task)?;
        records.extend(
            paths
                .iter()
                .enumerate()
                .map(|(i, s)| CorpusRecord::from_scanpath(s, format!("gen:{}:{i}", a.seed), a.width, a.height)),
        );
    }
    write_corpus(&a.out, &records)?;
    log::info!("wrote {} scanpaths to {}", records.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            serde_json::from_str::<EvalConfig>(&text).map_err(|e| Error::Format {
                path: p.clone(),
                msg: format!("line {}: {e}", e.line()),
            })?
        }
        None => EvalConfig::default(),
    };
    if let Some(t) = a.rss_threshold {
        cfg.rss_threshold = t;
    }
    if let Some(b) = a.bins {
        cfg.bins = b;
    }
    let gen = read_corpus(&a.gen)?;
    let human = read_corpus(&a.human)?;
    let mut segmaps = BTreeMap::new();
    if let Some(dir) = &a.segmaps {
        for r in &human {
            let path = dir.join(format!("{}.sdsg", r.stimulus_id));
            if !segmaps.contains_key(&r.stimulus_id) && path.exists() {
                segmaps.insert(r.stimulus_id.clone(), read_segmap(&path)?);
            }
        }
    }
    let report = evaluate(&gen, &human, &segmaps, &cfg)?;
    let mut text = serde_json::to_string_pretty(&report).context("serializing report")?;
    text.push('\n');
    fs::write(&a.report, text).map_err(|e| Error::Io { path: a.report.clone(), source: e })?;
    log::info!("{} groups evaluated, report at {}", report.groups, a.report.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut failures = Vec::new();
    for seed in a.first_seed..a.first_seed + a.seeds {
        for c in gradient_suite(seed)? {
            let w = worst.entry(c.name.clone()).or_insert(0.0);
            *w = w.max(c.max_rel_error);
            if !c.passed() {
                failures.push(format!("{} (seed {seed}): max relative error {:.3e}, worst {:?}", c.name, c.max_rel_error, c.worst));
            }
        }
    }
    for (name, w) in &worst {
        println!("{name:<24} max relative error {w:.3e}");
    }
    if failures.is_empty() {
        println!("all gradient checks passed over {} seeds", a.seeds);
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed: {}", failures.join("; "))).into())
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match (a.preset, &a.spec) {
        (Some(Preset::Overfit), _) => SyntheticTaskSpec::overfit(),
        (Some(Preset::TwoMode), _) => SyntheticTaskSpec::two_mode(),
        (Some(Preset::VariableLength), _) => SyntheticTaskSpec::variable_length(),
        (None, Some(p)) => SyntheticTaskSpec::load(p)?,
        (None, None) => unreachable!("clap requires --spec or --preset"),
    };
    let corpus = generate_synthetic_corpus(&spec, a.seed)?;
    corpus.write(&a.out)?;
    log::info!("wrote {} scanpaths to {}", corpus.records.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
        Command::Schema => {
            print!("{REPORT_SCHEMA}");
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already carry their cause in the message.
            if e.is::<Error>() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

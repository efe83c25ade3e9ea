mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use intuition_core::checkpoint::Checkpoint;
use intuition_core::data::{load_dataset, sample_subset, TRAIN_FRACTION};
use intuition_core::experience::load_db;
use intuition_core::filter::{PurityMap, DEFAULT_MIN_GATE};
use intuition_core::gradcheck::{self, GradCheckReport};
use intuition_core::metrics::DEFAULT_THETA;
use intuition_core::model::{Model, ModelConfig};
use intuition_core::objectives::{LossWeights, Phase};
use intuition_core::pipeline::{self, Architecture, Layout};
use intuition_core::seed::{DEFAULT_SEED, SEED_ENV};
use intuition_core::synthetic;
use intuition_core::tracer::{self, TraceOptions};
use intuition_core::train::{StageReport, TrainRunConfig};
use intuition_core::vq::DEFAULT_BETA;

use config::{pick, pick_opt, FileConfig};

const PRIMITIVE_TOL: f64 = 1e-4;
const SYNTHETIC_SAMPLES: usize = 2000;

#[derive(Parser, Debug)]
#[command(name = "intuition", version, about = "Train, filter, evaluate and inspect a dynamic intuition classifier")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON config file. Its values replace defaults; environment and flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding data, checkpoints, experience databases and reports.
    #[arg(long, global = true, default_value = "run")]
    workdir: PathBuf,
    /// Master seed for splitting, initialization, shuffling and sampling.
    #[arg(long, global = true, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a labeled corpus (or a generated synthetic one) and build the vocabulary.
    Prepare(PrepareArgs),
    /// Phase 0: self-supervised reconstruction pretraining.
    Pretrain(ModelArgs),
    /// Phase 1: supervised training, then record the training set.
    TrainBaseline(BaselineArgs),
    /// Phase 2: expert refinement on the training and filtered sets, then record the training set.
    TrainExpert(TrainArgs),
    /// Build the purity map from the phase-1 records and keep the records that pass all three checks.
    Filter(FilterArgs),
    /// Evaluate a checkpoint on the validation split and print the result as JSON.
    Evaluate(EvaluateArgs),
    /// Explain one prediction using the model and the experience database.
    Trace(TraceArgs),
    /// Write the files the dashboard reads into one directory.
    ExportDashboard(ExportArgs),
    /// Run the finite-difference gradient checks.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// JSON array of {"text", "label"} records. Omit to generate a synthetic corpus.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of records to use [default: all records, or 2000 synthetic].
    #[arg(long)]
    samples: Option<usize>,
    /// Fraction of records assigned to training.
    #[arg(long, default_value_t = TRAIN_FRACTION)]
    train_fraction: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training epochs (phase 1: epochs with gates detached).
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    /// Phase 1 epochs with gates live.
    #[arg(long, default_value_t = 1)]
    gated_epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Weight of the codebook and commitment losses.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_purity: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_focus: f64,
    /// Keep the codebook and commitment losses in phase 2.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    expert_vq: bool,
    /// Exclude the codebook from optimizer updates.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    freeze_codebook: bool,
    /// Reconstruct from the last block instead of the first in phase 0.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    recon_full_stack: bool,
    /// Loss log path [default: <workdir>/loss_log_phase<N>.jsonl].
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = ModelConfig::standard(2).d_model)]
    d_model: usize,
    #[arg(long, default_value_t = ModelConfig::standard(2).num_heads)]
    num_heads: usize,
    #[arg(long, default_value_t = ModelConfig::standard(2).num_layers)]
    num_layers: usize,
    #[arg(long, default_value_t = ModelConfig::standard(2).codebook_size)]
    codebook_size: usize,
    #[arg(long, default_value_t = ModelConfig::standard(2).ffn_hidden)]
    ffn_hidden: usize,
    /// Quantizer, router and gate; false builds the plain-transformer ablation.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    intuition: bool,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Start from fresh weights instead of the phase-0 checkpoint.
    #[arg(long)]
    from_scratch: bool,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Every gate score of a kept record must exceed this.
    #[arg(long, default_value_t = DEFAULT_MIN_GATE)]
    min_gate: f64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint phase to evaluate.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    phase: u8,
    /// Gating threshold on the mean gate score.
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
    /// Evaluate a seeded random subset of this size [default: whole validation split].
    #[arg(long)]
    sample_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    /// Text to classify and explain.
    #[arg(long)]
    text: String,
    /// Checkpoint phase; its experience database is used for matching.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    phase: u8,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
    /// Print the report as JSON instead of text.
    #[arg(long)]
    json: bool,
    /// Show the matched record's stored internals instead of running the model.
    #[arg(long)]
    replay: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Output directory [default: <workdir>/dashboard].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = gradcheck::STEP)]
    step: f64,
}

/// Settings after layering the config file under the environment and flags.
struct Resolved<'a> {
    matches: &'a ArgMatches,
    file: FileConfig,
    layout: Layout,
    seed: u64,
}

impl Resolved<'_> {
    fn train(&self, a: &TrainArgs) -> TrainRunConfig {
        let (m, f) = (self.matches, &self.file);
        TrainRunConfig {
            epochs: pick(m, "epochs", a.epochs, f.epochs),
            gated_epochs: pick(m, "gated_epochs", a.gated_epochs, f.gated_epochs),
            batch_size: pick(m, "batch_size", a.batch_size, f.batch_size),
            learning_rate: pick(m, "learning_rate", a.learning_rate, f.learning_rate),
            weights: LossWeights {
                beta: pick(m, "beta", a.beta, f.beta),
                lambda_purity: pick(m, "lambda_purity", a.lambda_purity, f.lambda_purity),
                lambda_focus: pick(m, "lambda_focus", a.lambda_focus, f.lambda_focus),
                expert_vq: pick(m, "expert_vq", a.expert_vq, f.expert_vq),
            },
            seed: self.seed,
            freeze_codebook: pick(m, "freeze_codebook", a.freeze_codebook, f.freeze_codebook),
            recon_full_stack: pick(m, "recon_full_stack", a.recon_full_stack, f.recon_full_stack),
            loss_log: pick_opt(m, "loss_log", a.loss_log.clone(), f.loss_log.clone()),
            ..TrainRunConfig::default()
        }
    }

    fn architecture(&self, a: &ModelArgs) -> Architecture {
        let (m, f) = (self.matches, &self.file);
        Architecture {
            d_model: pick(m, "d_model", a.d_model, f.d_model),
            num_heads: pick(m, "num_heads", a.num_heads, f.num_heads),
            num_layers: pick(m, "num_layers", a.num_layers, f.num_layers),
            codebook_size: pick(m, "codebook_size", a.codebook_size, f.codebook_size),
            ffn_hidden: pick(m, "ffn_hidden", a.ffn_hidden, f.ffn_hidden),
            intuition_enabled: pick(m, "intuition", a.intuition, f.intuition),
        }
    }

    fn theta(&self, parsed: f64) -> f64 {
        pick(self.matches, "theta", parsed, self.file.theta)
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    phase: u8,
    checkpoint: &'a Path,
    steps: usize,
    final_loss: Option<f64>,
    skipped_batches: usize,
    epoch_accuracy: &'a [f64],
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn report_training(layout: &Layout, phase: Phase, report: &StageReport) -> Result<()> {
    let checkpoint = layout.checkpoint(phase);
    print_json(&TrainSummary {
        phase: phase.into(),
        checkpoint: &checkpoint,
        steps: report.losses.len(),
        final_loss: report.losses.last().map(|l| l.total),
        skipped_batches: report.skipped_batches.len(),
        epoch_accuracy: &report.epoch_accuracy,
    })
}

fn phase_of(n: u8) -> Result<Phase> {
    Phase::try_from(n).map_err(anyhow::Error::msg)
}

fn prepare(r: &Resolved, a: &PrepareArgs) -> Result<()> {
    let (m, f) = (r.matches, &r.file);
    let data = pick_opt(m, "data", a.data.clone(), f.data.clone());
    let samples = pick_opt(m, "samples", a.samples, f.samples);
    let fraction = pick(m, "train_fraction", a.train_fraction, f.train_fraction);
    let corpus = match &data {
        Some(path) => {
            let all = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
            match samples {
                Some(n) => sample_subset(&all, n, r.seed)?,
                None => all,
            }
        }
        None => synthetic::generate(samples.unwrap_or(SYNTHETIC_SAMPLES), r.seed),
    };
    let p = pipeline::prepare(&r.layout, &corpus, fraction, r.seed)?;
    log::info!(
        "{} records from {}: {} train, {} validation, vocabulary {}",
        corpus.len(),
        data.as_deref().map_or("the synthetic generator".into(), |p| p.display().to_string()),
        p.train.len(),
        p.validation.len(),
        p.vocab.len()
    );
    Ok(())
}

fn trace(r: &Resolved, a: &TraceArgs) -> Result<()> {
    let phase = phase_of(a.phase)?;
    let prepared = pipeline::load_prepared(&r.layout)?;
    let ckpt = Checkpoint::load(&r.layout.checkpoint(phase))?;
    let db_name = if phase == Phase::Expert {
        pipeline::DB_GENERATED
    } else {
        pipeline::DB_FINETUNED
    };
    let db = load_db(&r.layout.file(db_name))?;
    let map = PurityMap::build(&db, ckpt.model.config().codebook_size)?;
    let opts = TraceOptions {
        theta: r.theta(a.theta),
        replay: a.replay,
    };
    let report = tracer::trace(&a.text, &ckpt, &prepared.vocab, &db, &map, opts)?;
    if a.json {
        print_json(&report)
    } else {
        print!("{}", tracer::render(&report));
        Ok(())
    }
}

fn grad_check(a: &GradCheckArgs, seed: u64) -> Result<()> {
    #[derive(Serialize)]
    struct Output {
        primitives: Vec<(String, f64)>,
        primitive_tolerance: f64,
        model: GradCheckReport,
        model_tolerance: f64,
    }
    let out = Output {
        primitives: intuition_autograd::primitive_suite(a.step)?,
        primitive_tolerance: PRIMITIVE_TOL,
        model: gradcheck::check_model(&Model::init(ModelConfig::toy(), seed)?, 4, seed, a.step)?,
        model_tolerance: gradcheck::TOLERANCE,
    };
    print_json(&out)?;
    let failing: Vec<&str> = out
        .primitives
        .iter()
        .filter(|(_, e)| !(*e < PRIMITIVE_TOL))
        .map(|(n, _)| n.as_str())
        .collect();
    if !failing.is_empty() {
        bail!("primitive gradients out of tolerance: {}", failing.join(", "));
    }
    if !out.model.passed() {
        bail!(
            "model gradient error {:.3e} at {} exceeds {:.0e}",
            out.model.max_rel_error,
            out.model.worst.as_deref().unwrap_or("?"),
            gradcheck::TOLERANCE
        );
    }
    Ok(())
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let file = match &cli.global.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let workdir = pick(sub, "workdir", cli.global.workdir.clone(), file.workdir.clone());
    let seed = pick(sub, "seed", cli.global.seed, file.seed);
    eprintln!(
        "intuition {} | {name} | seed {seed} | workdir {}",
        env!("CARGO_PKG_VERSION"),
        workdir.display()
    );
    let r = Resolved {
        matches: sub,
        file,
        layout: Layout::new(workdir),
        seed,
    };

    match &cli.command {
        Command::Prepare(a) => prepare(&r, a),
        Command::Pretrain(a) => {
            let (_, report) = pipeline::pretrain(&r.layout, &r.train(&a.train), &r.architecture(a))?;
            report_training(&r.layout, Phase::Pretrain, &report)
        }
        Command::TrainBaseline(a) => {
            let cfg = r.train(&a.model.train);
            let (_, report) = pipeline::train_baseline(&r.layout, &cfg, &r.architecture(&a.model), a.from_scratch)?;
            report_training(&r.layout, Phase::Baseline, &report)
        }
        Command::TrainExpert(a) => {
            let (_, report) = pipeline::train_expert(&r.layout, &r.train(a))?;
            report_training(&r.layout, Phase::Expert, &report)
        }
        Command::Filter(a) => {
            let min_gate = pick(sub, "min_gate", a.min_gate, r.file.min_gate);
            print_json(&pipeline::filter(&r.layout, min_gate)?)
        }
        Command::Evaluate(a) => {
            let sample_size = pick_opt(sub, "sample_size", a.sample_size, r.file.sample_size);
            let (result, _) = pipeline::evaluate(&r.layout, phase_of(a.phase)?, r.theta(a.theta), sample_size, seed)?;
            print_json(&result)
        }
        Command::Trace(a) => trace(&r, a),
        Command::ExportDashboard(a) => {
            let out = a.out.clone().unwrap_or_else(|| r.layout.file("dashboard"));
            let result = pipeline::export_dashboard(&r.layout, &out, r.theta(a.theta))?;
            log::info!("dashboard files written to {}", out.display());
            print_json(&result)
        }
        Command::GradCheck(a) => grad_check(a, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Clap exits with status 2 on usage errors and 0 for --help/--version.
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `scenflow` command-line interface.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use config::RunConfig;
use scenflow::agents::scenario::Kind;
use scenflow::flow::{Optimizer, Schedule};

#[derive(Debug, Parser)]
#[command(
    name = "scenflow",
    version,
    about = "Text-conditioned generation of daily power scenarios"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short = 'o', global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scenario dataset with metadata and labels.
    SynthData(SynthDataArgs),
    /// Render prompts from statistics and export reference embeddings.
    Annotate(AnnotateArgs),
    /// Train a velocity network on an annotated dataset.
    Train(TrainArgs),
    /// Generate scenarios for the prompts of a dataset.
    Sample(SampleArgs),
    /// Compare real and generated sets with the full metric suite.
    Eval(EvalArgs),
    /// Fit linear probes from embeddings to label columns.
    Probe(ProbeArgs),
    /// Score series against prompt metadata.
    Judge(JudgeArgs),
}

#[derive(Debug, Args)]
struct SynthDataArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: Option<Kind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    len: Option<usize>,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Checkpoint to continue from; its step counter is kept.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Use the min-norm weighting of the two losses.
    #[arg(long, action = ArgAction::Set)]
    mgda: Option<bool>,
    /// Spectral weight when MGDA is off.
    #[arg(long)]
    static_lambda: Option<f64>,
    #[arg(long, value_parser = ["sgd", "adamw"])]
    optimizer: Option<String>,
    #[arg(long, value_parser = ["constant", "one-cycle"])]
    schedule: Option<String>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    samples_per_prompt: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    real: Option<PathBuf>,
    #[arg(long)]
    generated: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    attributes: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct JudgeArgs {
    #[arg(long)]
    generated: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<Kind, String> {
    Kind::parse(s).ok_or_else(|| format!("unknown kind `{s}` (expected pv or load)"))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.global.seed, cli.seed);
    set(&mut cfg.global.output_dir, cli.output_dir.clone());
    set(&mut cfg.global.log_level, cli.log_level.clone());
    match &cli.command {
        Command::SynthData(a) => {
            let c = &mut cfg.synth_data;
            set(&mut c.kind, a.kind);
            set(&mut c.n, a.n);
            set(&mut c.len, a.len);
        }
        Command::Annotate(a) => set_opt(&mut cfg.annotate.input, a.input.clone()),
        Command::Train(a) => {
            let c = &mut cfg.train;
            set_opt(&mut c.dataset, a.dataset.clone());
            set_opt(&mut c.embeddings, a.embeddings.clone());
            set_opt(&mut c.resume, a.resume.clone());
            let p = &mut c.params;
            set(&mut p.epochs, a.epochs);
            set(&mut p.batch_size, a.batch_size);
            set(&mut p.learning_rate, a.learning_rate);
            set(&mut p.mgda_enabled, a.mgda);
            set(&mut p.static_lambda, a.static_lambda);
            match a.optimizer.as_deref() {
                Some("sgd") => p.optimizer = Optimizer::Sgd,
                Some("adamw") if !matches!(p.optimizer, Optimizer::AdamW { .. }) => {
                    p.optimizer = Optimizer::adam()
                }
                _ => {}
            }
            match a.schedule.as_deref() {
                Some("constant") => p.schedule = Schedule::Constant,
                Some("one-cycle") if !matches!(p.schedule, Schedule::OneCycle { .. }) => {
                    p.schedule = Schedule::OneCycle {
                        pct_start: 0.3,
                        div: 25.0,
                        final_div: 1e4,
                    }
                }
                _ => {}
            }
        }
        Command::Sample(a) => {
            let c = &mut cfg.sample;
            set_opt(&mut c.checkpoint, a.checkpoint.clone());
            set_opt(&mut c.prompts, a.prompts.clone());
            set_opt(&mut c.embeddings, a.embeddings.clone());
            set(&mut c.samples_per_prompt, a.samples_per_prompt);
            set(&mut c.steps, a.steps);
        }
        Command::Eval(a) => {
            set_opt(&mut cfg.eval.real, a.real.clone());
            set_opt(&mut cfg.eval.generated, a.generated.clone());
        }
        Command::Probe(a) => {
            set_opt(&mut cfg.probe.embeddings, a.embeddings.clone());
            set_opt(&mut cfg.probe.labels, a.labels.clone());
            set(&mut cfg.probe.attributes, a.attributes.clone());
        }
        Command::Judge(a) => {
            set_opt(&mut cfg.judge.generated, a.generated.clone());
            set_opt(&mut cfg.judge.dataset, a.dataset.clone());
        }
    }
    cfg.train.params.seed = cfg.global.seed;
    Ok(cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        e.downcast_ref::<scenflow::Error>()
            .is_some_and(scenflow::Error::is_numeric)
    });
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cfg.global.log_level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    let result = match cli.command {
        Command::SynthData(_) => commands::synth_data(&cfg),
        Command::Annotate(_) => commands::annotate(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Sample(_) => commands::sample(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Probe(_) => commands::probe(&cfg),
        Command::Judge(_) => commands::judge(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

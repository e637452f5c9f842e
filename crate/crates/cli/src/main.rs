use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use outtask_cli::config::{ExperimentSpec, Mode, UsageError};

#[derive(Parser)]
#[command(
    name = "outtask",
    version,
    about = "Out-of-task training experiments for dialog state tracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the DST baseline.
    Train(Common),
    /// Intermediate fine-tuning on an auxiliary task, then DST.
    Itft(Common),
    /// Multi-task training alternating auxiliary and DST batches.
    Mtl(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write synthetic dialog, span QA and classification corpora.
    SynthData(Common),
    /// Learn a subword vocabulary.
    TokenizerTrain(Common),
    /// Compare finished runs against a baseline run.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Run directories to compare.
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several. Replaces the config's list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn build(mode: Mode, common: &Common) -> anyhow::Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(p) => ExperimentSpec::load(p).map_err(|e| UsageError(format!("{e:#}")))?,
        None => ExperimentSpec::default(),
    };
    spec.mode = mode;
    let mut spec = spec.with_overrides(&common.overrides)?;
    spec.mode = mode;
    if !common.seeds.is_empty() {
        spec.seeds = common.seeds.clone();
    }
    if let Some(o) = &common.out {
        spec.out = Some(o.clone());
    }
    Ok(spec)
}

fn spec_of(cmd: &Command) -> anyhow::Result<ExperimentSpec> {
    Ok(match cmd {
        Command::Train(c) => build(Mode::Baseline, c)?,
        Command::Itft(c) => build(Mode::Itft, c)?,
        Command::Mtl(c) => build(Mode::Mtl, c)?,
        Command::SynthData(c) => build(Mode::SynthData, c)?,
        Command::TokenizerTrain(c) => build(Mode::TokenizerTrain, c)?,
        Command::Eval { common, checkpoint } => {
            let mut s = build(Mode::Eval, common)?;
            if let Some(c) = checkpoint {
                s.checkpoint = Some(c.clone());
            }
            s
        }
        Command::Report { common, baseline, runs } => {
            let mut s = build(Mode::Report, common)?;
            if let Some(b) = baseline {
                s.baseline_run = Some(b.clone());
            }
            if !runs.is_empty() {
                s.runs = runs.clone();
            }
            s
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let spec = match spec_of(&cli.command).and_then(|s| s.validate().map(|_| s).map_err(Into::into)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match outtask_cli::run::run(&spec) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smoothlab::experiments::{self, ExperimentConfig, ExperimentKind};
use smoothlab::Error;

#[derive(Parser)]
#[command(name = "smoothlab", version, about = "Label smoothing experiments on small MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and report test error.
    Train(RunArgs),
    /// Reliability diagrams and ECE before and after temperature scaling.
    Calibrate(RunArgs),
    /// Penultimate-layer projections onto three class templates.
    Project(RunArgs),
    /// Teacher/student distillation sweep over smoothing and temperature.
    DistillSweep(RunArgs),
    /// Mutual information between example index and a logit gap over training.
    MiTrack(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(kind: ExperimentKind, args: RunArgs) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if cfg.kind != kind {
        return Err(Error::Config {
            field: "experiment.kind".into(),
            reason: format!("config is for '{}', not '{}'", cfg.kind.as_str(), kind.as_str()),
        });
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = args.out {
        cfg.output = o;
    }
    let m = experiments::run(&cfg)?;
    println!("{}: {} artifacts in {}", m.kind, m.artifacts.len(), cfg.output.display());
    for (k, v) in &m.metrics {
        println!("  {k} = {v}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Train(a) => (ExperimentKind::Train, a),
        Command::Calibrate(a) => (ExperimentKind::Calibrate, a),
        Command::Project(a) => (ExperimentKind::Project, a),
        Command::DistillSweep(a) => (ExperimentKind::DistillSweep, a),
        Command::MiTrack(a) => (ExperimentKind::MiTrack, a),
    };
    match run(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lomo::pipeline::{load_config, validate_config, Experiment, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(
    name = "lomo",
    version,
    about = "Leave-one-magnification-out experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split, train, evaluate and extract signatures.
    All(RunArgs),
    /// Patient-disjoint split, fold manifests and leakage audit.
    Split(RunArgs),
    /// Train every configured method on every fold.
    Train(RunArgs),
    /// Test-split metrics from saved checkpoints.
    Eval(RunArgs),
    /// Sparse signatures and stability from saved checkpoints.
    Signature(RunArgs),
    /// Report every problem in a config file without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir` from the config.
    #[arg(long, env = "LOMO_OUT")]
    out: Option<PathBuf>,
    /// Global seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn run(stage: Stage, args: RunArgs) -> lomo::Result<()> {
    let mut cfg = match &args.config {
        // An unreadable config file is a configuration problem, not a run failure.
        Some(p) => load_config(p).map_err(|e| match e {
            lomo::Error::Io { .. } => lomo::Error::Config {
                field: "config".into(),
                reason: e.to_string(),
            },
            e => e,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.jobs.is_some() {
        cfg.jobs = args.jobs;
    }
    let out = args.out.unwrap_or_else(|| cfg.output.dir.clone());
    cfg.output.dir = out.clone();
    Experiment::new(&cfg, out)?.run(stage)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Validate { config } => {
            return match validate_config(&config) {
                Ok(v) if v.is_empty() => {
                    println!("{}: ok", config.display());
                    ExitCode::SUCCESS
                }
                Ok(v) => {
                    for (field, reason) in v {
                        eprintln!("{field}: {reason}");
                    }
                    ExitCode::from(EXIT_CONFIG)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_CONFIG)
                }
            };
        }
        Command::All(a) => (Stage::All, a),
        Command::Split(a) => (Stage::Split, a),
        Command::Train(a) => (Stage::Train, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::Signature(a) => (Stage::Signature, a),
    };
    match run(stage, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

//! `cfx`: runs the experiment stages from a TOML configuration.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use cfx_core::harness::{self, ExperimentConfig, Layout};
use cfx_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfx", version, about = "Manipulation detectors and counter-forensic attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long, default_value = "cfx-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset stages.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Applies every configured manipulation to the pristine patches.
    Manipulate(Common),
    /// Feature stages.
    Features {
        #[command(subcommand)]
        action: FeaturesAction,
    },
    /// Trains every configured detector on every task.
    Train(Common),
    /// Scores the test pairs and stores the metrics.
    Evaluate(Common),
    /// Runs the attack campaigns and the transferability evaluation.
    Attack(Common),
    /// Writes CSV and Markdown reports.
    Report(Common),
    /// Runs every stage in order.
    Run(Common),
    /// Prints the effective configuration as TOML.
    Config(Common),
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Generates the pristine patches and the device split.
    Build(Common),
}

#[derive(Subcommand)]
enum FeaturesAction {
    /// Writes SPAM features of every selected pair to CSV.
    Extract(Common),
}

fn load_config(c: &Common) -> cfx_core::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> cfx_core::Result<()> {
    let common = match &cmd {
        Command::Dataset { action: DatasetAction::Build(c) }
        | Command::Features { action: FeaturesAction::Extract(c) }
        | Command::Manipulate(c)
        | Command::Train(c)
        | Command::Evaluate(c)
        | Command::Attack(c)
        | Command::Report(c)
        | Command::Run(c)
        | Command::Config(c) => c.clone(),
    };
    let cfg = load_config(&common)?;
    let layout = Layout::new(&common.out);
    match cmd {
        Command::Dataset { .. } => {
            let n = harness::stage_dataset(&cfg, &layout)?;
            println!("wrote {n} pristine patches under {}", layout.images_dir(None).display());
        }
        Command::Manipulate(_) => {
            let n = harness::stage_manipulate(&cfg, &layout)?;
            println!("wrote {n} manipulated patches");
        }
        Command::Features { .. } => {
            let n = harness::stage_features(&cfg, &layout)?;
            println!("wrote {n} feature rows under {}", layout.root.join("features").display());
        }
        Command::Train(_) => {
            let n = harness::stage_train(&cfg, &layout)?;
            println!("trained {n} detectors");
        }
        Command::Evaluate(_) => {
            for r in harness::stage_evaluate(&cfg, &layout)? {
                println!("{:<12} {:<14} FPR {:6.2}  TPR {:6.2}  ACC {:6.2}", r.task, r.detector, r.fpr, r.tpr, r.acc);
            }
        }
        Command::Attack(_) => {
            for c in harness::stage_attack(&cfg, &layout)? {
                println!(
                    "{:<5} target {:<14} evaluator {:<14} {:<12} TPR {:6.2}",
                    c.attack, c.target, c.evaluator, c.task, c.tpr_under_attack
                );
            }
        }
        Command::Report(_) => {
            let files = harness::stage_report(&cfg, &layout)?;
            println!("wrote {}", files.markdown.display());
        }
        Command::Run(_) => {
            let files = harness::stage_run(&cfg, &layout)?;
            println!("wrote {}", files.markdown.display());
        }
        Command::Config(_) => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

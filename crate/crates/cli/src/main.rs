use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nadamw_runner::config::ExperimentConfig;
use nadamw_runner::{cmd_params, cmd_run, cmd_sweep, cmd_toy, cmd_verify, CliError};

#[derive(Parser)]
#[command(name = "nadamw", version, about = "AdamW/NAdamW convergence experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print prescribed hyperparameters and check the parameter constraints.
    Params {
        #[command(flatten)]
        common: Common,
    },
    /// Run an experiment for each configured seed.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one axis (k, d or lambda) over seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// One-dimensional weight-decay experiment.
    Toy {
        #[command(flatten)]
        common: Common,
        /// Comma-separated weight decay values.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
    },
    /// Audit the supporting lemmas.
    VerifyLemmas {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, required: bool) -> Result<ExperimentConfig, CliError> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None if required => Err(CliError::Config("--config is required".into())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Params { common }
        | Command::Run { common }
        | Command::Sweep { common }
        | Command::Toy { common, .. }
        | Command::VerifyLemmas { common } => common,
    };
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    }
    let required = matches!(
        cli.command,
        Command::Params { .. } | Command::Run { .. } | Command::Sweep { .. }
    );
    let cfg = load(common, required)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let seed = common.seed;
    match &cli.command {
        Command::Params { .. } => cmd_params(&cfg),
        Command::Run { .. } => cmd_run(&cfg, seed, &out).map(drop),
        Command::Sweep { .. } => cmd_sweep(&cfg, seed, &out),
        Command::Toy { lambda, .. } => cmd_toy(&cfg, lambda.clone(), seed, &out).map(drop),
        Command::VerifyLemmas { .. } => cmd_verify(&cfg, seed, &out).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nadamw: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

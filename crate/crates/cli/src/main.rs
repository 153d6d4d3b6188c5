use std::path::PathBuf;
use std::process::ExitCode;

use ccfg_cli::commands::{cmd_evaluate, cmd_export_maps, cmd_generate, cmd_sample, cmd_select, cmd_train, Context};
use ccfg_cli::config::{ExperimentConfig, Overrides};
use ccfg_core::guidance::Scheme;
use clap::{Parser, Subcommand};

/// Composite classifier-free guidance experiments on synthetic wind fields.
#[derive(Parser)]
#[command(name = "ccfg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts and config snapshots.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Guidance scheme: direct, cfg or ccfg.
    #[arg(long, global = true)]
    scheme: Option<Scheme>,

    /// Ensemble size.
    #[arg(long, global = true)]
    ensemble: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/eval datasets.
    Generate,
    /// Train the denoiser.
    Train,
    /// Select composite-guidance subset weights.
    Select,
    /// Sample predictions for the evaluation set.
    Sample,
    /// Sample with each scheme and report metrics.
    Evaluate,
    /// Export mean and bias maps from sampled predictions.
    ExportMaps,
}

fn run(cli: Cli) -> ccfg_core::Result<()> {
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let config = config.with_overrides(&Overrides {
        seed: cli.seed,
        scheme: cli.scheme,
        ensemble: cli.ensemble,
    })?;
    let ctx = Context::new(config, cli.out);
    match cli.command {
        Command::Generate => cmd_generate(&ctx),
        Command::Train => cmd_train(&ctx).map(drop),
        Command::Select => cmd_select(&ctx).map(drop),
        Command::Sample => cmd_sample(&ctx).map(drop),
        Command::Evaluate => cmd_evaluate(&ctx).map(drop),
        Command::ExportMaps => cmd_export_maps(&ctx).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).format_timestamp(None).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error [{category}]: {e}");
            ExitCode::from(match category {
                "config" => 2,
                "data" => 3,
                _ => 4,
            })
        }
    }
}

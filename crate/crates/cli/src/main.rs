use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use riskgp_cli::{
    cmd_evaluate, cmd_export_covariance, cmd_generate, cmd_predict, cmd_train, resolve_config,
    CliError,
};

/// Multimodal deep-kernel GP risk model: generate data, train, evaluate,
/// predict with uncertainty, export patient-correlation structure.
#[derive(Parser)]
#[command(name = "riskgp", version, about)]
struct Cli {
    /// Key-value configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master random seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Drop data modalities for ablation runs.
    #[arg(long, global = true, value_enum)]
    ablate: Option<Ablation>,
    /// Data directory override (fixture files live here).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Location,
    Demographics,
    Both,
}

impl Ablation {
    fn as_str(self) -> &'static str {
        match self {
            Ablation::Location => "location",
            Ablation::Demographics => "demographics",
            Ablation::Both => "both",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled cohort as fixture files.
    Generate,
    /// Pre-train the embeddings and fit the GP objective.
    Train,
    /// Metrics on the test split at each uncertainty-removal level.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-patient risk and uncertainty scores as CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to score: train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Kernel matrix over a balanced patient sample plus its 2-way
    /// spectral partition.
    ExportCovariance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Balanced sample size (half per class).
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = resolve_config(
        cli.config.as_deref(),
        cli.seed,
        cli.ablate.map(Ablation::as_str),
        cli.data_dir.as_deref(),
    )?;
    match cli.command {
        Command::Generate => cmd_generate(&config, &cli.out),
        Command::Train => cmd_train(&config, &cli.out).map(|report| {
            let epochs = report.epochs.len();
            println!(
                "trained {epochs} epochs; best epoch {:?}; outputs in {}",
                report.best_epoch,
                cli.out.display()
            );
        }),
        Command::Evaluate { checkpoint } => cmd_evaluate(&config, &checkpoint, &cli.out),
        Command::Predict { checkpoint, split } => {
            cmd_predict(&config, &checkpoint, &cli.out, &split)
        }
        Command::ExportCovariance {
            checkpoint,
            samples,
        } => cmd_export_covariance(
            &config,
            &checkpoint,
            &cli.out,
            samples.unwrap_or(config.export_samples),
        ),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

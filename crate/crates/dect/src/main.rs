use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dect::{CliError, ExperimentConfig, Run, Stage};

#[derive(Parser)]
#[command(name = "dect", version, about = "Dual-energy CT material decomposition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render phantoms and draw noisy dual-energy sinograms.
    Simulate(Args),
    /// Calibrate the polynomial sinogram decomposer.
    FitDecomp(Args),
    /// Train the denoiser through the unrolled reconstruction.
    Train(Args),
    /// Reconstruct every test sinogram with the unrolled method and FBP.
    Reconstruct(Args),
    /// Tabulate PSNR against the ground truth and write previews.
    Evaluate(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(stage: Stage, args: Args) -> Result<(), CliError> {
    let config = ExperimentConfig::load(&args.config)?;
    Run::new(config, args.seed, args.out)?.execute(stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Simulate(a) => (Stage::Simulate, a),
        Command::FitDecomp(a) => (Stage::FitDecomp, a),
        Command::Train(a) => (Stage::Train, a),
        Command::Reconstruct(a) => (Stage::Reconstruct, a),
        Command::Evaluate(a) => (Stage::Evaluate, a),
    };
    match run(stage, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use swarmkin::io::{load_config, run_experiment, ExperimentKind, IoError};

/// Swarm coverage model: agents and mean-field densities side by side.
#[derive(Parser)]
#[command(
    name = "swarmkin",
    version,
    about,
    after_help = "Set RAYON_NUM_THREADS to limit worker threads (default: all cores)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the closed-form steady state and sample it on a grid
    Equilibrium(RunArgs),
    /// Step interacting agents and record their moments and histograms
    Particles(RunArgs),
    /// Advance the mean-field density on a grid
    Fp(RunArgs),
    /// Run agents and the grid solver side by side and measure distances
    Compare(RunArgs),
    /// Track relative-entropy decay toward a reference state
    Entropy(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the seed from the file (TOML integers cap it at i64::MAX)
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Override the output directory from the file
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(kind: ExperimentKind, args: RunArgs) -> Result<(), IoError> {
    let mut config = load_config(&args.config)?;
    if config.kind != kind {
        return Err(IoError::BadConfig(vec![format!(
            "{} declares kind = \"{}\", but the {} subcommand was invoked",
            args.config.display(),
            config.kind.name(),
            kind.name()
        )]));
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    let manifest = run_experiment(&config)?;
    for line in &manifest.summary {
        println!("{line}");
    }
    println!(
        "wrote {} files to {}",
        manifest.files.len(),
        manifest.output_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Equilibrium(a) => (ExperimentKind::Equilibrium, a),
        Command::Particles(a) => (ExperimentKind::Particles, a),
        Command::Fp(a) => (ExperimentKind::Fp, a),
        Command::Compare(a) => (ExperimentKind::Compare, a),
        Command::Entropy(a) => (ExperimentKind::Entropy, a),
    };
    match execute(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

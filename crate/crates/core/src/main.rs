use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stoch_eig::analysis::{run_experiment, status_line, ExperimentConfig, Method};

#[derive(Parser)]
#[command(name = "stoch-eig", version, about = "Stochastic Galerkin eigenvalue solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenpairs of the mean operator and the mean Rayleigh quotient expansion.
    MeanSolve(RunArgs),
    /// Stochastic inverse subspace iteration.
    Sisi(RunArgs),
    /// Shifted inverse iteration for an interior eigenvalue.
    SisiShifted(RunArgs),
    /// Inverse subspace iteration with deflated lower modes.
    SisiDeflated(RunArgs),
    /// Subspace iteration for the largest eigenvalues.
    SubspaceMax(RunArgs),
    /// Stochastic collocation on the sparse grid.
    Collocate(RunArgs),
    /// Monte Carlo reference samples.
    MonteCarlo(RunArgs),
    /// Mean solve, inverse iteration, collocation and Monte Carlo with error pdfs.
    Compare(RunArgs),
    /// Every method listed in the config.
    All(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (args, methods) = match cli.command {
        Command::MeanSolve(a) => (a, vec![Method::MeanSolve]),
        Command::Sisi(a) => (a, vec![Method::Sisi]),
        Command::SisiShifted(a) => (a, vec![Method::SisiShifted]),
        Command::SisiDeflated(a) => (a, vec![Method::SisiDeflated]),
        Command::SubspaceMax(a) => (a, vec![Method::SubspaceMax]),
        Command::Collocate(a) => (a, vec![Method::Collocate]),
        Command::MonteCarlo(a) => (a, vec![Method::MonteCarlo]),
        Command::Compare(a) => (
            a,
            vec![Method::MeanSolve, Method::Sisi, Method::Collocate, Method::MonteCarlo],
        ),
        Command::All(a) => (a, Vec::new()),
    };
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: config {}: {e}", args.config.display());
            return ExitCode::FAILURE;
        }
    };
    if let Some(seed) = args.seed {
        cfg.monte_carlo.seed = seed;
    }
    let methods = if methods.is_empty() { cfg.methods.clone() } else { methods };
    match run_experiment(&cfg, &methods, &args.out) {
        Ok(report) => {
            println!("{}", status_line(&methods, &report));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spde_core::harness::archive::ARCHIVE_ENV;
use spde_core::harness::Experiment;

mod config;
mod dispatch;
mod plot;

use dispatch::{dispatch, Overrides, EXIT_FAIL};

/// Simulate and check a semilinear stochastic heat equation on (0, 1).
#[derive(Parser)]
#[command(name = "spde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One path, stored as a trajectory record.
    Simulate(Common),
    /// Pathwise energy identity and its expectation bound.
    Energy(Common),
    /// Uniform-in-alpha L^2m moment bound.
    Moment2m(Common),
    /// Lyapunov functional bound.
    Lyapunov(Common),
    /// Weak convergence as alpha goes to 0.
    AlphaConverge(Common),
    /// Contraction of nearby starts under shared noise.
    Gronwall(Common),
    /// Fokker-Planck residual on a bank of test functions.
    FpeCheck(Common),
    /// Drift conditions and the approximation bound.
    Audit(Common),
    /// Trace condition and stochastic convolution moments.
    NoiseDiag(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Archive root; beats `output.archive`.
    #[arg(long, env = ARCHIVE_ENV)]
    archive: Option<PathBuf>,
    /// Write plot data files next to the report.
    #[arg(long)]
    emit_plots: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match cli.command {
        Command::Simulate(c) => (Experiment::Simulate, c),
        Command::Energy(c) => (Experiment::Energy, c),
        Command::Moment2m(c) => (Experiment::Moment2m, c),
        Command::Lyapunov(c) => (Experiment::Lyapunov, c),
        Command::AlphaConverge(c) => (Experiment::AlphaConvergence, c),
        Command::Gronwall(c) => (Experiment::Gronwall, c),
        Command::FpeCheck(c) => (Experiment::FpeCheck, c),
        Command::Audit(c) => (Experiment::HypothesisAudit, c),
        Command::NoiseDiag(c) => (Experiment::NoiseDiagnostics, c),
    };
    let config = match config::parse_config(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: config {e}");
            return ExitCode::from(EXIT_FAIL as u8);
        }
    };
    let overrides = Overrides {
        seed: common.seed,
        threads: common.threads,
        archive: common.archive,
        emit_plots: common.emit_plots,
    };
    ExitCode::from(dispatch(name, &config, &overrides) as u8)
}

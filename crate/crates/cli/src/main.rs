use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tqdiff_cli::config::ScenarioKind;
use tqdiff_cli::runner::run_many;

/// Quantum Brownian motion scenarios: free dispersion, density evolution,
/// equilibrium, tunneling, plasma relaxation and sedimentation.
#[derive(Parser)]
#[command(name = "tqdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Position dispersion of a free particle over a log-spaced time grid.
    Msd(RunArgs),
    /// Time evolution of a density under the quantum Smoluchowski equation.
    Evolve(RunArgs),
    /// Stationary density in a confining potential.
    Equilibrium(RunArgs),
    /// Classical, semiclassical and self-consistent densities at fixed energy.
    Tunnel(RunArgs),
    /// Charge-density relaxation spectrum of a plasma.
    Plasma(RunArgs),
    /// Sedimentation of a particle column in gravity.
    Barometric(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario files (`key = value`, one per line).
    #[arg(required = true)]
    configs: Vec<PathBuf>,
    /// Directory for the outputs; with several configs, each run writes to a
    /// subdirectory named after its file.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Number of configs run concurrently.
    #[arg(short, long, default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Msd(a) => (ScenarioKind::Msd, a),
        Command::Evolve(a) => (ScenarioKind::Evolve, a),
        Command::Equilibrium(a) => (ScenarioKind::Equilibrium, a),
        Command::Tunnel(a) => (ScenarioKind::Tunnel, a),
        Command::Plasma(a) => (ScenarioKind::Plasma, a),
        Command::Barometric(a) => (ScenarioKind::Barometric, a),
    };
    let outcomes = run_many(Some(kind), &args.configs, args.output_dir.as_deref(), args.jobs);
    let mut code = 0;
    for o in &outcomes {
        for w in &o.warnings {
            eprintln!("{}: warning: {w}", o.config.display());
        }
        match &o.result {
            Ok(report) => {
                println!("{}: ok, wrote {} to {}", o.config.display(), report.outputs.join(", "), o.dir.display())
            }
            Err(e) => eprintln!("{}: error: {e}", o.config.display()),
        }
        code = code.max(o.exit_code());
    }
    ExitCode::from(code as u8)
}

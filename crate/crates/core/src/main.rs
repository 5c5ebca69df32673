use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use congested_mfg::scenario::{run_scenario, Command, ScenarioConfig};

#[derive(Parser)]
#[command(name = "congested-mfg", version, about = "Congested crowd motion and mean field game solvers")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Gradient flow of the crowd energy under rho <= 1 or an L^m penalty.
    Crowd(RunArgs),
    /// Mean field game with congestion penalty rho^(m-1).
    MfgPenalized(RunArgs),
    /// Mean field game with the density constraint rho <= 1.
    MfgConstrained(RunArgs),
    /// Constrained Benamou-Brenier problem by primal-dual iterations.
    Variational(RunArgs),
    /// Stationary equilibrium on the unit-measure superlevel set of Phi.
    VerifyExample(RunArgs),
    /// Penalized flows for increasing m against the constrained flow.
    MSweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON document.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output` or `runs/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::Crowd(a) => (Command::Crowd, a),
        Cmd::MfgPenalized(a) => (Command::MfgPenalized, a),
        Cmd::MfgConstrained(a) => (Command::MfgConstrained, a),
        Cmd::Variational(a) => (Command::Variational, a),
        Cmd::VerifyExample(a) => (Command::VerifyExample, a),
        Cmd::MSweep(a) => (Command::MSweep, a),
    };
    let mut cfg = match ScenarioConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cmd.name()));
    match run_scenario(&cfg, cmd, &out) {
        Ok(outcome) => {
            if !args.quiet || !outcome.passed() {
                match std::fs::read_to_string(out.join("summary.txt")) {
                    Ok(text) => print!("{text}"),
                    Err(e) => eprintln!("error: cannot read summary: {e}"),
                }
                println!("artifacts: {}", out.display());
            }
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

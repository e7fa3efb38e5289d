use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tdmjls_cli::{load_with_overrides, run, CliError, Command, Overrides};

/// Moment analysis of jump linear systems and TD(0) policy evaluation.
#[derive(Parser, Debug)]
#[command(name = "tdmjls", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Stability, steady state, exact MSE trajectory and bound envelope.
    Analyze(Common),
    /// Everything `analyze` does plus a Monte Carlo estimate of the MSE.
    Simulate(Common),
    /// Spectral radii and steady-state error over a list of step sizes.
    Sweep(Common),
    /// Step size at which the second-moment dynamics lose stability.
    CriticalAlpha(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Problem configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte Carlo base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of steps after step 0.
    #[arg(long)]
    horizon: Option<usize>,
    /// Step size, or a comma-separated list for `sweep`.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Monte Carlo trajectory count.
    #[arg(long)]
    mc_trajectories: Option<usize>,
    /// Print the normalized config and exit.
    #[arg(long)]
    dump_config: bool,
}

fn execute(cmd: Command, args: Common) -> Result<(), CliError> {
    let overrides = Overrides {
        out: args.out,
        seed: args.seed,
        horizon: args.horizon,
        alpha: args.alpha,
        mc_trajectories: args.mc_trajectories,
    };
    let cfg = load_with_overrides(&args.config, &overrides)?;
    if args.dump_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let outcome = run(cmd, &cfg)?;
    print!("{}", outcome.summary);
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (cmd, args) = match cli.command {
        Sub::Analyze(a) => (Command::Analyze, a),
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Sweep(a) => (Command::Sweep, a),
        Sub::CriticalAlpha(a) => (Command::CriticalAlpha, a),
    };
    match execute(cmd, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().trim_end());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

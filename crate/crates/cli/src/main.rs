use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meshopt_cli::{cmd_drops, cmd_run, cmd_sweep, CliError, ExperimentConfig, Outcome, Settings};

#[derive(Parser)]
#[command(
    name = "meshopt",
    version,
    about = "Distributed optimization on a simulated robot mesh"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tune (if requested) and run each algorithm over every trial seed.
    Run(Common),
    /// Iterations to threshold across a parameter grid.
    Sweep(Common),
    /// Median iterations as a function of link drop probability.
    Drops(Common),
}

#[derive(Args)]
struct Common {
    /// Config file, or one of the presets: case-study, sensitivity, drops, hardware-standin.
    config: String,
    /// Number of trial seeds.
    #[arg(long)]
    seed_count: Option<usize>,
    /// Iteration cap for runs and tuning probes.
    #[arg(long)]
    max_iters: Option<u64>,
    /// Output path prefix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run C-ADMM on lossy topologies.
    #[arg(long)]
    allow_unsupported: bool,
    /// Packet payload size in bytes.
    #[arg(long)]
    payload_bytes: Option<usize>,
    /// Worker threads per run.
    #[arg(long)]
    workers: Option<usize>,
    /// Keep measured wall time in trace files.
    #[arg(long)]
    wall_time: bool,
}

type Handler = fn(&ExperimentConfig, &std::path::Path, &Settings) -> Result<Outcome, CliError>;

fn execute(handler: Handler, args: Common) -> Result<Outcome, CliError> {
    let (cfg, dir) = ExperimentConfig::load(&args.config)?;
    let settings = Settings {
        seed_count: args.seed_count,
        max_iters: args.max_iters,
        out: args.out,
        allow_unsupported: args.allow_unsupported,
        payload_bytes: args.payload_bytes,
        workers: args.workers,
        wall_time: args.wall_time,
    };
    handler(&cfg, &dir, &settings)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (handler, args): (Handler, Common) = match cli.command {
        Cmd::Run(a) => (cmd_run, a),
        Cmd::Sweep(a) => (cmd_sweep, a),
        Cmd::Drops(a) => (cmd_drops, a),
    };
    match execute(handler, args) {
        Ok(outcome) => {
            println!("{}", outcome.summary.display());
            if outcome.all_diverged {
                eprintln!("meshopt: every run diverged");
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("meshopt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

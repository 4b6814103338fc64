use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cnfgnn::federation::Strategy;
use cnfgnn::harness::{self, ExperimentConfig, Overrides};
use cnfgnn::Error;

#[derive(Parser)]
#[command(name = "cnfgnn", version, about = "Simulated cross-node federated GNN training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one strategy and write metrics, ledger, checkpoints and summary.
    Run(Common),
    /// Train on the westernmost eta fraction of nodes, evaluate on all.
    Inductive(Common),
    /// One run per (client rounds, server rounds) cell of the grid.
    Sweep(Common),
    /// Write a synthetic dataset and a config that reads it.
    Synth(Common),
    /// Parse and check a config, then print it fully resolved.
    ValidateConfig(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    eta: Option<f64>,
    /// Client rounds per global round.
    #[arg(long)]
    rc: Option<usize>,
    /// Server rounds per global round.
    #[arg(long)]
    rs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let o = Overrides {
            seed: self.seed,
            output_dir: self.out.clone(),
            strategy: self.strategy,
            eta: self.eta,
            client_rounds: self.rc,
            server_rounds: self.rs,
        };
        ExperimentConfig::resolve(self.config.as_deref(), &o)
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run(c) => print_json(&harness::run(&c.resolve()?)?),
        Command::Inductive(c) => {
            let cfg = c.resolve()?;
            if cfg.eta.is_none() {
                return Err(Error::Config("inductive needs --eta or eta in the config".into()));
            }
            print_json(&harness::run_inductive(&cfg)?)
        }
        Command::Sweep(c) => print_json(&harness::run_sweep(&c.resolve()?)?),
        Command::Synth(c) => {
            let cfg = c.resolve()?;
            let path = harness::write_synthetic(&cfg, &cfg.output_dir)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::ValidateConfig(c) => print_json(&c.resolve()?),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NumericFailure { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

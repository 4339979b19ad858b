use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use liqlab::cli::{run, RunError};
use liqlab::config::{ConfigError, ScenarioConfig};

#[derive(Parser)]
#[command(name = "liqlab", version, about = "Liquidity-risk market model laboratory")]
struct Args {
    /// Scenario file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a scenario key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate factor, price and depth paths.
    Simulate,
    /// Replay a strategy through both cash accounting routes.
    Ledger,
    /// Price the variance swaps and inspect the hedge matrix.
    Swaps,
    /// Solve the quadratic BSDE for one position size.
    Bsde,
    /// Replication cost curve for small positions.
    Replicate,
    /// Falsification test of the no-arbitrage property.
    ArbitrageTest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ledger => "ledger",
            Command::Swaps => "swaps",
            Command::Bsde => "bsde",
            Command::Replicate => "replicate",
            Command::ArbitrageTest => "arbitrage-test",
        }
    }
}

fn resolve(args: &Args) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = match &args.config {
        Some(path) => ScenarioConfig::from_file(path)?,
        None => ScenarioConfig::default(),
    };
    for s in &args.set {
        cfg.apply_override(s)?;
    }
    if let Some(out) = &args.out {
        cfg.out = out.display().to_string();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = resolve(&args)
        .map_err(RunError::from)
        .and_then(|cfg| run(args.command.name(), &cfg));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod manifest;

use config::ExperimentConfig;
use error::CliError;
use manifest::{unix_now, write_run, Artifacts};

#[derive(Parser)]
#[command(
    name = "entroflow",
    version,
    about = "Langevin diffusion flows, time reversal and entropic costs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment file (TOML, or JSON with a .json extension). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for ensemble simulation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "ENTROFLOW_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve the Fokker-Planck flow; writes density.csv and entropy.csv.
    Forward,
    /// Simulate the controlled time reversal for each configured policy.
    Reverse,
    /// Compare simulated entropic costs with relative entropies at both stages.
    VerifyControl,
    /// Check entropy dissipation, decay and Pinsker along the flow.
    EntropyReport,
    /// Run the alternating backward/forward iteration; writes trace.csv.
    Iterate,
    /// Long-run occupation of a set by stationary trajectories.
    Ergodic,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Reverse => "reverse",
            Command::VerifyControl => "verify-control",
            Command::EntropyReport => "entropy-report",
            Command::Iterate => "iterate",
            Command::Ergodic => "ergodic",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let started = unix_now();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("`--threads` must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));

    let mut artifacts = Artifacts::default();
    match cli.command {
        Command::Forward => commands::forward(&cfg, &mut artifacts)?,
        Command::Reverse => commands::reverse(&cfg, &mut artifacts)?,
        Command::VerifyControl => commands::verify_control(&cfg, &mut artifacts)?,
        Command::EntropyReport => commands::entropy_report(&cfg, &mut artifacts)?,
        Command::Iterate => commands::iterate(&cfg, &mut artifacts)?,
        Command::Ergodic => commands::ergodic(&cfg, &mut artifacts)?,
    }
    write_run(&dir, cli.command.name(), &cfg, started, &artifacts)?;
    for c in &artifacts.checks {
        println!(
            "{} {}: {} ({})",
            if c.pass { "PASS" } else { "FAIL" },
            c.module,
            c.name,
            c.detail
        );
    }
    println!(
        "wrote {} files and manifest.json to {}",
        artifacts.files.len(),
        dir.display()
    );
    match artifacts.failures() {
        0 => Ok(()),
        n => Err(CliError::Checks(n)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

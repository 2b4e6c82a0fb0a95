//! Command-line pipeline driver.
//!
//! Exit codes: 0 success, 1 numerical-check failure, 2 config error,
//! 3 solver non-convergence.

mod config;
mod pipeline;

use clap::{Parser, Subcommand};
use config::PipelineConfig;
use pipeline::{CliError, Meta};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "klift",
    version,
    about = "Feedback synthesis via spectral analysis of the lifted state-costate dynamics"
)]
struct Cli {
    /// Path to the JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent rollouts.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Seed for perturbed Newton restarts on failed grid nodes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the Hamiltonian structure of the lifted dynamics.
    Check,
    /// Assemble the Galerkin matrix and export its mirrored spectrum.
    Spectrum,
    /// Synthesize the feedback law and evaluate it on a grid.
    Synthesize,
    /// Roll out the closed loop from configured initial states.
    Simulate,
    /// Compare the synthesized law against a reference polynomial law.
    Compare,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("--config PATH is required"))?;
    let bytes = std::fs::read(config_path)
        .map_err(|e| CliError::config(format!("reading {}: {e}", config_path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::config("config file is not valid UTF-8"))?;
    let cfg = PipelineConfig::parse(&text)?;
    let meta = Meta::new(&bytes);

    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::config(format!("creating {}: {e}", out.display())))?;

    match cli.command {
        Command::Check => pipeline::cmd_check(&cfg, &meta, &out),
        Command::Spectrum => pipeline::cmd_spectrum(&cfg, &meta, &out),
        Command::Synthesize => pipeline::cmd_synthesize(&cfg, &meta, &out, cli.seed),
        Command::Simulate => pipeline::cmd_simulate(&cfg, &meta, &out, cli.threads.max(1)),
        Command::Compare => pipeline::cmd_compare(&cfg, &meta, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message);
            std::process::exit(e.code);
        }
    }
}

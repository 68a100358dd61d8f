//! Batch front-end: experiment runs, catalog listing and config validation.
//!
//! Exit codes: 0 success, 1 certification failure, 2 configuration error,
//! 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use nashlab::error::Error;
use nashlab::experiment::{self, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nashlab", version, about = "Heat-kernel laboratory for singular-drift operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment configuration and write artifacts + manifest.
    Run(RunArgs),
    /// List the drift and matrix catalog.
    ListCatalog {
        /// Machine-readable JSON instead of the text table.
        #[arg(long)]
        json: bool,
        /// Restrict to kinds available in this dimension.
        #[arg(long)]
        dimension: Option<usize>,
    },
    /// Parse and validate a configuration without running it.
    ValidateConfig {
        /// Path to the TOML configuration.
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML configuration (omit with --preset).
    config: Option<PathBuf>,
    /// Built-in configuration preset (`paper-suite`).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (owned exclusively by this run).
    #[arg(short, long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the thread count (also honours NASHLAB_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Input(_) => 2,
        Error::NoCertificate(_) | Error::Smallness(_) => 1,
        _ => 3,
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            ExperimentConfig::from_toml(&text)?
        }
        (None, Some(name)) => match name.as_str() {
            "paper-suite" => experiment::paper_suite_config(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (available: paper-suite)"
                )))
            }
        },
        (Some(_), Some(_)) => {
            return Err(Error::Config("give either a config path or --preset, not both".into()))
        }
        (None, None) => {
            return Err(Error::Config("a config path or --preset is required".into()))
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(threads) = args.threads {
        config.threads = threads;
    } else if let Ok(v) = std::env::var("NASHLAB_THREADS") {
        config.threads = v
            .parse()
            .map_err(|_| Error::Config(format!("NASHLAB_THREADS is not a number: {v}")))?;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let config = match load_config(&args) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(exit_code_for(&e));
                }
            };
            match experiment::run(&config, &args.out) {
                Ok(outcome) => {
                    println!("manifest: {}", outcome.manifest_path.display());
                    if outcome.certification_failures.is_empty() {
                        println!("all requested certifications passed");
                        ExitCode::SUCCESS
                    } else {
                        for f in &outcome.certification_failures {
                            eprintln!("certification failure: {f}");
                        }
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code_for(&e))
                }
            }
        }
        Command::ListCatalog { json, dimension } => {
            print!("{}", experiment::list_catalog(json, dimension));
            ExitCode::SUCCESS
        }
        Command::ValidateConfig { config } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            match ExperimentConfig::from_toml(&text) {
                Ok(_) => {
                    println!("configuration ok");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}

//! Batch experiment runner for the `layerlab` numerical laboratory.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::Parser;

pub use commands::{execute, Command};
pub use config::{Config, ConfigError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "layerlab", version, about = "Layer potential experiments for periodic elliptic operators")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory receiving the CSV tables and the summary.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Treat warnings as failed assertions.
    #[arg(long)]
    pub strict: bool,
}

/// Loads the configuration, applying command-line overrides.
pub fn load(cli: &Cli) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| ConfigError { pointer: String::new(), message: format!("cannot read {}: {e}", cli.config.display()) })?;
    let mut cfg = Config::parse(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Runs one subcommand and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return EXIT_USAGE;
        }
        // A pool that already exists (repeated calls in one process) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let cfg = match load(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let hash = cfg.hash();
    let report = match execute(cli.command, &cfg) {
        Ok(r) => r,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigError>() {
                eprintln!("error: {c}");
                return EXIT_USAGE;
            }
            eprintln!("error: {e:#}");
            return EXIT_RUNTIME;
        }
    };
    if let Err(e) = report.write(&cli.out_dir, &hash, cli.strict) {
        eprintln!("error: writing outputs to {}: {e}", cli.out_dir.display());
        return EXIT_RUNTIME;
    }
    print!("{}", report.summary(&hash, cli.strict));
    if report.failed(cli.strict) {
        EXIT_ASSERTION
    } else {
        EXIT_OK
    }
}

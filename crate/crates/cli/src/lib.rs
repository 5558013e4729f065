//! Experiment driver: configuration, caching and report emission around the
//! `expfbm` verification suites.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
mod output;
mod store;

pub use config::{ExperimentConfig, CODE_VERSION};

/// Environment variable that overrides the worker count.
pub const WORKERS_ENV: &str = "EXPFBM_WORKERS";

pub mod exit {
    pub const PASS: i32 = 0;
    pub const VIOLATION: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const RESOURCE: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error(transparent)]
    Core(#[from] expfbm::Error),

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use expfbm::Error as E;
        match self {
            CliError::Config(_) | CliError::Dependency(_) => exit::CONFIG,
            CliError::Resource(_) | CliError::Io { .. } => exit::RESOURCE,
            CliError::Core(e) => match e {
                E::Resource(_) | E::Io(_) => exit::RESOURCE,
                _ => exit::CONFIG,
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

#[derive(Debug, Parser)]
#[command(name = "expfbm", version, about = "Simulation and bound verification for exponential functionals of fBm")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat JSON config; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Print the result document as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Restrict to one bound id (comma-separated for several).
    #[arg(long, global = true, value_name = "ID")]
    pub only: Option<String>,

    /// Outer path count: `nested_paths` for malliavin, `sample_paths` otherwise.
    #[arg(long, global = true, value_name = "N")]
    pub paths: Option<usize>,

    /// Inner path count for nested estimates.
    #[arg(long, global = true, value_name = "N")]
    pub inner: Option<usize>,

    /// Grid size: `nested_grid_n` for malliavin, `grid_n` otherwise.
    #[arg(long, global = true, value_name = "N")]
    pub grid: Option<usize>,

    /// Fail instead of simulating when cached samples are missing.
    #[arg(long, global = true)]
    pub no_simulate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Kernel normalization and integral identities.
    KernelVerify,
    /// Sample F and X, write sample files and fill the cache.
    Simulate,
    /// Log-domain KDE and the density envelopes.
    Density,
    /// Every bound suite, bundled.
    Bounds,
    /// Nested Malliavin estimates, variance identity, w_X and Clark-Ocone.
    Malliavin,
    /// Summary table over the documents already in the output directory.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::KernelVerify => "kernel-verify",
            Command::Simulate => "simulate",
            Command::Density => "density",
            Command::Bounds => "bounds",
            Command::Malliavin => "malliavin",
            Command::Report => "report",
        }
    }
}

/// Resolves the effective config: file, then flag overrides.
pub fn effective_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.to_string_lossy().into_owned();
    }
    let nested = cli.command == Command::Malliavin;
    if let Some(p) = cli.paths {
        if nested {
            cfg.nested_paths = p;
        } else {
            cfg.sample_paths = p;
        }
    }
    if let Some(i) = cli.inner {
        cfg.inner_paths = i;
    }
    if let Some(g) = cli.grid {
        if nested {
            cfg.nested_grid_n = g;
        } else {
            cfg.grid_n = g;
        }
    }
    if let Ok(w) = std::env::var(WORKERS_ENV) {
        let w: usize = w.trim().parse().map_err(|_| CliError::Config(format!("{WORKERS_ENV}={w} is not a count")))?;
        cfg.workers = Some(w);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(feature = "parallel")]
fn init_workers(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(w) = workers {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_workers(_workers: Option<usize>) -> Result<(), CliError> {
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = effective_config(&cli).and_then(|cfg| {
        init_workers(cfg.workers)?;
        commands::dispatch(&cli, cfg)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if cli.json {
                let doc = serde_json::json!({
                    "command": cli.command.name(),
                    "code_version": CODE_VERSION,
                    "error": e.to_string(),
                    "exit_code": e.exit_code(),
                });
                println!("{}", serde_json::to_string_pretty(&doc).expect("error document serializes"));
            }
            e.exit_code()
        }
    }
}

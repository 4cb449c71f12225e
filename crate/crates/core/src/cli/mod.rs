//! Command-line front end. Every command reads one TOML config, writes its
//! artifacts atomically into the output directory and finishes with a
//! `manifest.json`.
//!
//! Exit codes: 0 success (including failed checks, which are reported in the
//! outputs), 2 usage or configuration errors, 3 numerical failures, 4 I/O and
//! data errors.

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{default_params, STATIONARITY_MIRROR_EPS, dynamics_from, max_stationarity_residual, potential_from, Context, Outcome};
pub use config::Config;
pub use manifest::{write_atomic, Clock, OutputSet, RunManifest};

use crate::error::Error;

#[derive(Debug, Parser)]
#[command(name = "langevin-lab", version, about = "Generalized Langevin sampling and rate-function lab")]
pub struct Cli {
    /// TOML config for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "LANGEVIN_LAB_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Size of the worker pool.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Zero wall times and pin timestamps to SOURCE_DATE_EPOCH (or 0).
    #[arg(long, global = true)]
    pub reproducible: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Run an ensemble of chains and summarize the empirical measure.
    Sample,
    /// Compare a variant's rate function with its overdamped baseline.
    Rates,
    /// Bayesian logistic regression accuracy trajectories.
    Blr,
    /// Check a Lyapunov drift bound on a grid.
    Lyapunov,
    /// Fokker–Planck stationarity residuals of the built-in dynamics.
    CheckStationarity,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Rates => "rates",
            Command::Blr => "blr",
            Command::Lyapunov => "lyapunov",
            Command::CheckStationarity => "check-stationarity",
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32, Error> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::usage("--threads must be at least 1"));
        }
        // A pool may already exist when several commands run in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let path = cli.config.as_ref().ok_or_else(|| Error::config("--config", "a config file is required"))?;
    let cfg = Config::load(path)?;
    let seed = match cli.seed {
        Some(s) => s,
        None => cfg.u64_or("seed", 0)?,
    };
    let clock = Clock { reproducible: cli.reproducible };
    let started = clock.now();
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Context {
        seed,
        reproducible: cli.reproducible,
        config_dir: path.parent().map(PathBuf::from).unwrap_or_default(),
    };
    let mut out = OutputSet::new(out_dir);
    let outcome = match cli.command {
        Command::Sample => commands::cmd_sample(&cfg, &ctx, &mut out),
        Command::Rates => commands::cmd_rates(&cfg, &ctx, &mut out),
        Command::Blr => commands::cmd_blr(&cfg, &ctx, &mut out),
        Command::Lyapunov => commands::cmd_lyapunov(&cfg, &ctx, &mut out),
        Command::CheckStationarity => commands::cmd_check_stationarity(&cfg, &ctx, &mut out),
    }?;
    let mut deviations = outcome.deviations;
    if cli.seed.is_some() {
        deviations.push(format!("seed overridden on the command line to {seed}"));
    }
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config_digest: cfg.digest(),
        seed,
        started,
        finished: clock.now(),
        outputs: out.files.clone(),
        deviations,
    };
    out.write_json("manifest.json", &manifest)?;
    Ok(outcome.exit_code)
}

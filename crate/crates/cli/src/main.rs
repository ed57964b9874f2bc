use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

mod config;
mod experiments;

use config::{Experiment, ExperimentConfig};

/// Runs one relative-localization experiment and writes CSV results.
///
/// Exit status: 0 on success, 1 on configuration or I/O errors, 2 when some runs failed or
/// aborted (the summary is still written).
#[derive(Debug, Parser)]
#[command(name = "rangeloc", version)]
struct Cli {
    /// TOML experiment configuration; all keys are optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config (default: `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte Carlo realizations per cell for the sweeps; overrides the config.
    #[arg(long)]
    runs: Option<usize>,
    /// Worker threads (default: one per core). Results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Experiment to run; overrides the config.
    #[arg(long, value_enum)]
    experiment: Option<Experiment>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failures) => {
            eprintln!("{failures} run(s) failed or aborted; see summary.csv");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<usize> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(kind) = cli.experiment {
        config.experiment = Some(kind);
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(runs) = cli.runs {
        config.sweep.runs = runs;
    }
    if let Some(out) = cli.out {
        config.out = Some(out);
    }
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    config.out = Some(out.clone());
    let kind = config.validate().context("invalid configuration")?;

    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("starting worker threads")?;
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), config.to_toml()?).context("writing config echo")?;

    let report = experiments::run(kind, &config, &out)?;
    println!("{}", report.headline);
    Ok(report.failures)
}

//! `confloc` command-line front end.

pub mod config;
pub mod pipeline;
pub mod seed;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use config::{RawConfig, RunConfig};
use pipeline::Output;

#[derive(Debug, Parser)]
#[command(
    name = "confloc",
    version,
    about = "Conformal prediction for fingerprint-based indoor positioning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the dataset and write a summary.
    Ingest(Common),
    /// Write the train/cal/test assignment of every record.
    Split(Common),
    /// Fit k-NN and write calibration and test predictions.
    Fit(Common),
    /// Write the conformal threshold at `alpha`.
    Calibrate(Common),
    /// Write one prediction set per test record at `alpha`.
    PredictSets(Common),
    /// Calibrate the path-loss threshold for each beta.
    Risk(Common),
    /// Write conformal p-values of test points and the retained set.
    PvalueFilter(Common),
    /// Coverage and set size over the alpha grid.
    Sweep(Common),
    /// Write a synthetic dataset (and routes) in UJIIndoorLoc format.
    Synth(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Sets a single beta, replacing any `betas` list.
    #[arg(long)]
    beta: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut raw = match &self.config {
            Some(path) => RawConfig::load(path)?,
            None => RawConfig::default(),
        };
        for assignment in &self.set {
            raw.set_override(assignment)?;
        }
        let here = Path::new("");
        if let Some(seed) = self.seed {
            raw.set("seed", &seed.to_string(), here)?;
        }
        if let Some(alpha) = self.alpha {
            raw.set("alpha", &alpha.to_string(), here)?;
        }
        if let Some(beta) = self.beta {
            raw.remove("betas");
            raw.set("beta", &beta.to_string(), here)?;
        }
        if let Some(out) = &self.out {
            raw.set("out", &out.to_string_lossy(), here)?;
        }
        RunConfig::from_raw(&raw)
    }
}

type Stage = fn(&RunConfig, &Output) -> Result<Vec<PathBuf>>;

fn execute(command: Command) -> Result<()> {
    let (common, run): (&Common, Stage) = match &command {
        Command::Ingest(c) => (c, pipeline::ingest),
        Command::Split(c) => (c, pipeline::split),
        Command::Fit(c) => (c, pipeline::fit),
        Command::Calibrate(c) => (c, pipeline::calibrate),
        Command::PredictSets(c) => (c, |cfg, out| {
            let (files, coverage) = pipeline::predict_sets(cfg, out)?;
            println!("empirical coverage {coverage:.6} at alpha {}", cfg.alpha);
            Ok(files)
        }),
        Command::Risk(c) => (c, pipeline::risk),
        Command::PvalueFilter(c) => (c, pipeline::pvalue_filter),
        Command::Sweep(c) => (c, pipeline::sweep),
        Command::Synth(c) => (c, pipeline::synth),
    };
    let cfg = common.resolve()?;
    let out = Output::create(&cfg.out)?;
    for file in run(&cfg, &out)? {
        println!("wrote {}", file.display());
    }
    Ok(())
}

/// Runs one subcommand. Returns 0 on success, 1 on validation or runtime
/// failure and 2 on usage errors.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

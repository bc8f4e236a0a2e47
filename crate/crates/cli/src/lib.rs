//! `abound` command line: synthesize, train, forge, score and evaluate.

pub mod commands;
pub mod config;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

pub use error::CliError;

use config::{parse_override, RunConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "abound", version, about = "Few-shot multi-class anomaly detection toolchain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic embedding bundle.
    Synth(Common),
    /// Train on a bundle; writes a checkpoint and a training report.
    Train(Common),
    /// Forge fence features per class with a trained checkpoint.
    Forge(Common),
    /// Score every test sample; writes JSON lines and anomaly maps.
    Score(Common),
    /// Compute image and pixel metrics from a score directory.
    Eval(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root for run directories (paths.out).
    #[arg(long)]
    out: Option<String>,
    /// Seed for synthesis and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Bundle directory (paths.bundle).
    #[arg(long)]
    bundle: Option<String>,
    /// Checkpoint file (paths.checkpoint).
    #[arg(long)]
    checkpoint: Option<String>,
    /// Directory holding scores.jsonl (paths.scores).
    #[arg(long)]
    scores: Option<String>,
    /// Training epochs (train.epochs).
    #[arg(long)]
    epochs: Option<usize>,
    /// Training normals per class (synth.shots).
    #[arg(long)]
    shots: Option<usize>,
    /// Also write maps as ASCII PGM (output.pgm).
    #[arg(long)]
    pgm: bool,
    /// Override any config key, e.g. `train.attack.beta=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for score and eval.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, Value)>, CliError> {
        let mut out: Vec<(String, Value)> = Vec::new();
        let mut push = |key: &str, v: Value| out.push((key.to_string(), v));
        if let Some(v) = &self.out {
            push("paths.out", v.clone().into());
        }
        for (key, v) in [
            ("paths.bundle", &self.bundle),
            ("paths.checkpoint", &self.checkpoint),
            ("paths.scores", &self.scores),
        ] {
            if let Some(v) = v {
                push(key, v.clone().into());
            }
        }
        if let Some(seed) = self.seed {
            push("synth.seed", seed.into());
            push("train.seed", seed.into());
        }
        if let Some(v) = self.epochs {
            push("train.epochs", v.into());
        }
        if let Some(v) = self.shots {
            push("synth.shots", v.into());
        }
        if self.pgm {
            push("output.pgm", true.into());
        }
        for s in &self.sets {
            out.push(parse_override(s)?);
        }
        Ok(out)
    }
}

/// Runs one command line (program name first) and returns the run directory.
pub fn run<I, T>(argv: I) -> Result<PathBuf, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Config(e.to_string()))?;
    execute(cli)
}

fn execute(cli: Cli) -> Result<PathBuf, CliError> {
    let (name, common) = match &cli.command {
        Command::Synth(c) => ("synth", c),
        Command::Train(c) => ("train", c),
        Command::Forge(c) => ("forge", c),
        Command::Score(c) => ("score", c),
        Command::Eval(c) => ("eval", c),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(common.config.as_deref(), env_seed.as_deref(), &common.overrides()?)?;
    if common.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let dir = commands::prepare_run(&cfg, name)?;
    match cli.command {
        Command::Synth(_) => commands::synth(&cfg, &dir)?,
        Command::Train(_) => commands::train(&cfg, &dir)?,
        Command::Forge(_) => commands::forge(&cfg, &dir)?,
        Command::Score(_) => commands::score(&cfg, &dir, common.jobs)?,
        Command::Eval(_) => commands::eval(&cfg, &dir, common.jobs)?,
    }
    Ok(dir)
}

/// Entry point behind the binary: prints the run directory, returns the exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(dir) => {
            commands::announce(&dir);
            0
        }
        Err(e) => {
            eprintln!("abound: {e}");
            e.exit_code()
        }
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tta_core::adapt::Method;

use crate::commands::{cmd_adapt, cmd_bench, cmd_corrupt, cmd_train, RunContext};
use crate::config::Overrides;
use crate::error::Result;
use crate::report::cmd_report;
use crate::selftest::{cmd_selftest, SelftestOptions};

#[derive(Debug, Parser)]
#[command(name = "tta", version, about = "Fully test-time adaptation by entropy minimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source model and save its checkpoint.
    Train(TrainArgs),
    /// Write corrupted copies of the source test set.
    Corrupt(CorruptArgs),
    /// Adapt to each target and write evaluation reports.
    Adapt(AdaptArgs),
    /// Error grid of methods by corruption, one CSV per severity.
    Bench(BenchArgs),
    /// Gradient, identity, statistics, and entropy checks.
    Selftest(SelftestArgs),
    /// Histogram, curve, and example figures from adapt results.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to $TTA_OUT_ROOT/<name>, else runs/<name>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub severity: Option<u8>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub severity: Option<u8>,
    /// Adaptation epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub adapt: AdaptArgs,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write selftest.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test hook: initial gamma for the identity check.
    #[arg(long, hide = true)]
    pub inject_gamma: Option<f32>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of earlier `adapt` runs.
    pub results: PathBuf,
    /// Where figures go; defaults to <results>/report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn context(c: Common, overrides: Overrides, env_root: Option<PathBuf>) -> RunContext {
    RunContext {
        config: c.config,
        out: c.out,
        env_root,
        overrides: Overrides {
            seed: c.seed,
            ..overrides
        },
        workers: c.workers,
    }
}

fn adapt_context(a: AdaptArgs, env_root: Option<PathBuf>) -> RunContext {
    let o = Overrides {
        adapt_epochs: a.epochs,
        threshold: a.threshold,
        method: a.method,
        severity: a.severity,
        ..Overrides::default()
    };
    context(a.common, o, env_root)
}

/// Runs one command. `env_root` is the default output root.
pub fn run(command: Command, env_root: Option<PathBuf>) -> Result<()> {
    match command {
        Command::Train(a) => {
            let o = Overrides {
                train_epochs: a.epochs,
                ..Overrides::default()
            };
            cmd_train(&context(a.common, o, env_root)).map(drop)
        }
        Command::Corrupt(a) => {
            let o = Overrides {
                severity: a.severity,
                ..Overrides::default()
            };
            cmd_corrupt(&context(a.common, o, env_root)).map(drop)
        }
        Command::Adapt(a) => cmd_adapt(&adapt_context(a, env_root)).map(drop),
        Command::Bench(b) => cmd_bench(&adapt_context(b.adapt, env_root)).map(drop),
        Command::Selftest(a) => cmd_selftest(
            &SelftestOptions {
                seed: a.seed,
                inject_gamma: a.inject_gamma,
            },
            a.out.as_deref(),
        )
        .map(drop),
        Command::Report(a) => cmd_report(&a.results, a.out.as_deref()).map(drop),
    }
}

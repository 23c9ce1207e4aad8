//! Command-line driver: configuration, model files, reports and the
//! experiment commands.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod error;
pub mod inputs;
pub mod model;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use spen_core::train::MetricsLog;

use crate::commands::{Ctx, METRICS_FILE, REPORT_FILE};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::Report;

#[derive(Debug, Parser)]
#[command(name = "spen", version, about = "Train and evaluate structured prediction energy networks")]
pub struct Cli {
    /// Configuration file (`key = value` lines with `[section]` headers).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Alternating training of an energy and a cost-augmented inference network.
    TrainSpen,
    /// Linear-chain CRF trained by conditional log-likelihood.
    TrainCrf,
    /// Local BLSTM tagger trained by per-token log loss.
    TrainBlstm,
    /// Tag language model over gold or automatically tagged sequences.
    TrainTlm,
    /// Trains an inference network against a fixed energy.
    Distill,
    /// Tunes the test-time inference network to lower the energy of its outputs.
    Retune,
    /// Evaluates a saved model on dev and test.
    Eval,
    /// Decoding throughput of Viterbi versus the inference network.
    Bench,
    /// Writes a synthetic corpus.
    GenSynth,
    /// Writes the learned transition matrix as CSV.
    ExportPairwise,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainSpen => "train-spen",
            Command::TrainCrf => "train-crf",
            Command::TrainBlstm => "train-blstm",
            Command::TrainTlm => "train-tlm",
            Command::Distill => "distill",
            Command::Retune => "retune",
            Command::Eval => "eval",
            Command::Bench => "bench",
            Command::GenSynth => "gen-synth",
            Command::ExportPairwise => "export-pairwise",
        }
    }
}

/// The configuration a command line resolves to.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    // gen-synth reads no data files, and a shared config usually names
    // the ones it is about to write.
    if cli.command != Command::GenSynth {
        cfg.check_paths()?;
    }
    Ok(cfg)
}

/// Runs a command, writing the metrics log and report into its output
/// directory.
pub fn run(cli: &Cli) -> CliResult<Report> {
    let cfg = resolve_config(cli)?;
    let out = cfg.output_dir(cli.command.name());
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut ctx = Ctx {
        cfg: &cfg,
        log: MetricsLog::create(&out.join(METRICS_FILE))?,
        report: Report::new(cli.command.name(), cfg.seed),
        out,
    };
    log::info!("{} -> {}", cli.command.name(), ctx.out.display());
    commands::run(cli.command, &mut ctx)?;
    ctx.report.write(&ctx.out.join(REPORT_FILE))?;
    Ok(ctx.report)
}

//! `owod`: synthetic data, the open-world task protocol, practical mode,
//! threshold sweeps and offline evaluation.

mod commands;
mod plot;
mod table;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use owod::experiment::{RunConfig, SweepParam};

#[derive(Debug, Parser)]
#[command(
    name = "owod",
    version,
    about = "Open-world object detection experiments"
)]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory: the dataset for `synth`, the run directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Task index for single-task operations; the last task to run for
    /// `protocol` and `practical`.
    #[arg(long, global = true)]
    task: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset, COCO annotations and schedule file.
    Synth,
    /// Train and evaluate tasks 1..T on fully labelled data.
    Protocol,
    /// Like `protocol`, with new-class labels harvested from the previous
    /// model's unknown detections.
    Practical,
    /// Re-threshold a trained task model over a grid.
    Sweep {
        #[arg(long, value_enum)]
        param: Param,
        /// Comma-separated values in (0,1); the configured grid when omitted.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Score a detection dump against a COCO annotation file.
    Eval {
        /// COCO annotation file.
        #[arg(long)]
        gt: PathBuf,
        /// Detections in JSON lines, one detection per line.
        #[arg(long)]
        dets: PathBuf,
    },
    /// Rebuild the metrics table and trend plot of a run directory.
    Report,
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Param {
    ThetaObj,
    ThetaConf,
    ThetaCls,
}

impl From<Param> for SweepParam {
    fn from(p: Param) -> Self {
        match p {
            Param::ThetaObj => SweepParam::ThetaObj,
            Param::ThetaConf => SweepParam::ThetaConf,
            Param::ThetaCls => SweepParam::ThetaCls,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        match cli.command {
            Command::Synth => cfg.paths.data = out.clone(),
            _ => cfg.paths.run = out.clone(),
        }
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Protocol => commands::protocol(&cfg, cli.task, false),
        Command::Practical => commands::protocol(&cfg, cli.task, true),
        Command::Sweep { param, grid } => {
            commands::sweep(&cfg, cli.task, (*param).into(), grid.as_deref())
        }
        Command::Eval { gt, dets } => commands::eval(&cfg, cli.task, gt, dets, cli.out.as_deref()),
        Command::Report => commands::report(&cfg),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

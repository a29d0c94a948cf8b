//! Batch pipeline behind the `occtrack` binary: `gen`, `train`, `eval`, `viz` and `config`.

pub mod commands;
pub mod config;
pub mod error;
pub mod files;
pub mod figures;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use occtrack::memory::CellKind;
use occtrack::video::Direction;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "occtrack", version, about = "Video object detection through occlusion")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train, test, untextured-test and composite splits.
    Gen(GenArgs),
    /// Pretrain the frame detector and/or fine-tune a video detector.
    Train(TrainArgs),
    /// Score a weight archive on a split and write a JSON report.
    Eval(EvalArgs),
    /// Write detection overlays and memory heatmaps for one sequence.
    Viz(VizArgs),
    /// Print the fully-resolved configuration.
    Config,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Pretrain,
    Finetune,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset root written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory receiving weights, metric logs and the run manifest.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub stage: Stage,
    /// Memory cell of the fine-tuned model: none, stmm, matchtrans or learned_align.
    #[arg(long, value_parser = parse_cell)]
    pub cell: Option<CellKind>,
    /// Truncated-BPTT window length of the fine-tuning stage.
    #[arg(long)]
    pub bptt: Option<usize>,
    /// forward or bidirectional.
    #[arg(long, value_parser = parse_direction)]
    pub direction: Option<Direction>,
    /// Fine-tuning initialisation: a frame-detector archive, or `scratch`.
    /// Defaults to RUN/frame.weights when present.
    #[arg(long)]
    pub init: Option<String>,
    /// Continue an interrupted run from its archive.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override the step budget of the stage.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Stop after this many steps and save a resumable archive.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Archive path; defaults to RUN/<cell>.weights.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Weight archive to score.
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset root written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Split to score: train, test, test_untextured or composites.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report path (JSON).
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct VizArgs {
    /// Single archive to render; ignored with --compare.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Comma-separated cells whose RUN/<cell>.weights are stacked into one figure.
    #[arg(long, value_delimiter = ',', value_parser = parse_cell)]
    pub compare: Vec<CellKind>,
    /// Directory holding the archives named by --compare.
    #[arg(long)]
    pub weights_dir: Option<PathBuf>,
    /// Dataset root written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Split holding the sequence.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Index of the sequence within the split.
    #[arg(long, default_value_t = 0)]
    pub sequence: usize,
    /// First frame to render.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Number of frames to render; defaults to the rest of the sequence.
    #[arg(long)]
    pub count: Option<usize>,
    /// Output directory for the PNGs and persistence.csv.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_cell(s: &str) -> Result<CellKind, String> {
    s.parse().map_err(|e: occtrack::Error| e.to_string())
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    s.parse().map_err(|e: occtrack::Error| e.to_string())
}

/// Resolves the configuration, logs it and dispatches the subcommand.
pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    log::info!("occtrack {VERSION}");
    log::info!("resolved config:\n{}", cfg.to_flat());
    match cli.command {
        Command::Gen(a) => commands::gen(&cfg, &a).map(|_| ()),
        Command::Train(a) => commands::train(&cfg, &a).map(|_| ()),
        Command::Eval(a) => commands::eval(&cfg, &a).map(|_| ()),
        Command::Viz(a) => commands::viz(&cfg, &a),
        Command::Config => {
            print!("{}", cfg.to_flat());
            Ok(())
        }
    }
}

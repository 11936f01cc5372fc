//! `lapse`: dataset statistics, manifest preparation, training, evaluation
//! and timeline inference for laparoscopy event recognition.

mod commands;
mod config;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lapse_core::dataset::{DatasetError, EventClass, SplitMode};
use lapse_core::network::NetworkError;
use lapse_core::timeline::{TimelineError, TimelineFormat};
use lapse_core::training::TrainError;

#[derive(Parser)]
#[command(
    name = "lapse",
    version,
    about = "Event recognition in long laparoscopy videos"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct GlobalArgs {
    /// Global random seed [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads [default: 1]
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Root for relative video paths (overrides LAPSE_DATA_ROOT)
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-event dataset statistics
    Stats(StatsArgs),
    /// Split one event's task into train/test and write the training listing
    Prepare(PrepareArgs),
    /// Train one or more backbone/head combinations
    Train(TrainArgs),
    /// Evaluate checkpoints on their held-out splits
    Evaluate(EvaluateArgs),
    /// Run the four event models over a whole video
    Timeline(TimelineArgs),
    /// Write a small generated dataset of image-sequence videos
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Drop segments shorter than this before counting
    #[arg(long, default_value_t = 1.0)]
    min_duration: f64,
    /// Print JSON instead of a table
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitModeArg {
    Segment,
    Case,
}

impl From<SplitModeArg> for SplitMode {
    fn from(m: SplitModeArg) -> Self {
        match m {
            SplitModeArg::Segment => SplitMode::Segment,
            SplitModeArg::Case => SplitMode::Case,
        }
    }
}

#[derive(Args)]
pub struct PrepareArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Positive event: abdominal_access, bleeding, coag_transection or needle_passing
    #[arg(long, value_parser = parse_event)]
    event: EventClass,
    /// Fraction of segments assigned to training
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    #[arg(long, value_enum, default_value = "segment")]
    split_mode: SplitModeArg,
    /// Add augmented minority copies until both classes match
    #[arg(long)]
    balance: bool,
    #[arg(long, default_value_t = 1.0)]
    min_duration: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory written by `prepare`
    #[arg(long)]
    manifest: PathBuf,
    /// resnet50, efficientnetb0, stub or all
    #[arg(long)]
    backbone: Option<String>,
    /// transformer, lstm, gru, bilstm, bigru or all
    #[arg(long)]
    head: Option<String>,
    /// JSON file with default values for these flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, visible_alias = "epochs")]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, visible_alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long, visible_alias = "patience")]
    early_stop_patience: Option<usize>,
    /// Train the backbone projection together with the head
    #[arg(long, visible_alias = "fine-tune")]
    fine_tune_backbone: bool,
    /// Parent of the run directories [default: runs]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    /// Prepared manifest directories, one per event
    #[arg(long, num_args = 1.., required = true)]
    manifest: Vec<PathBuf>,
    /// Output directory for report.txt, report.csv and precision.svg
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
pub struct TimelineArgs {
    /// Directory of frame images
    #[arg(long)]
    video: PathBuf,
    /// One checkpoint per event
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Output file [default: <video name>.<format>]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: TimelineFormat,
    /// Majority-vote smoothing width (odd)
    #[arg(long)]
    smooth: Option<usize>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    cases: usize,
    /// Length of each video in seconds
    #[arg(long, default_value_t = 24.0)]
    duration: f64,
    #[arg(long, default_value_t = 15.0)]
    fps: f64,
    /// Side of the written frame images in pixels
    #[arg(long, default_value_t = 16)]
    frame_size: u32,
}

fn parse_event(s: &str) -> Result<EventClass, String> {
    s.parse()
}

fn parse_format(s: &str) -> Result<TimelineFormat, String> {
    s.parse()
}

/// Marks an error as caused by bad input (exit code 2).
#[derive(Debug)]
pub struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(message: impl fmt::Display) -> anyhow::Error {
    Invalid(message.to_string()).into()
}

fn network_validation(e: &NetworkError) -> bool {
    matches!(e, NetworkError::Config(_) | NetworkError::ConfigMismatch(_))
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if e.is::<Invalid>() {
            return true;
        }
        if let Some(d) = e.downcast_ref::<DatasetError>() {
            return d.is_validation();
        }
        if let Some(n) = e.downcast_ref::<NetworkError>() {
            return network_validation(n);
        }
        if let Some(t) = e.downcast_ref::<TrainError>() {
            return match t {
                TrainError::Config(_)
                | TrainError::EmptySplit(_)
                | TrainError::MissingClass { .. } => true,
                TrainError::Dataset(d) => d.is_validation(),
                TrainError::Network(n) => network_validation(n),
                _ => false,
            };
        }
        match e.downcast_ref::<TimelineError>() {
            Some(TimelineError::Window(_) | TimelineError::MissingModel(_)) => true,
            Some(TimelineError::Network(n)) => network_validation(n),
            _ => false,
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .init();
    if let Err(err) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.workers.unwrap_or(1).max(1))
        .build_global()
    {
        eprintln!("error: {err}");
        return ExitCode::from(3);
    }
    let result = match cli.command {
        Command::Stats(a) => commands::stats(&cli.global, a),
        Command::Prepare(a) => commands::prepare(&cli.global, a),
        Command::Train(a) => commands::train(&cli.global, a),
        Command::Evaluate(a) => commands::evaluate(&cli.global, a),
        Command::Timeline(a) => commands::timeline(&cli.global, a),
        Command::Synth(a) => synth::run(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_validation(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod heads;

use commands::CliError;

#[derive(Parser)]
#[command(name = "motpipe", version, about = "Detection, tracking and accelerator-model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides for the run-config keys. Flags win over `--config`.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub score_thresh: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub iou_min: Option<f64>,
    #[arg(long)]
    pub max_age: Option<u32>,
    #[arg(long)]
    pub min_hits: Option<u32>,
    #[arg(long)]
    pub mot_gate: Option<f64>,
    /// Do not report young tracks during the first `min_hits` frames.
    #[arg(long)]
    pub no_warmup: bool,
    /// Suppress across classes in NMS.
    #[arg(long)]
    pub class_agnostic: bool,
    /// Keep only these class ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<u32>>,
}

#[derive(Subcommand)]
enum Command {
    /// Run detections through NMS and SORT and write MOT results.
    Track(commands::TrackArgs),
    /// CLEAR MOT scores of result files against ground truth.
    EvalMot(commands::EvalMotArgs),
    /// COCO-style mAP of detections against ground truth.
    EvalDet(commands::EvalDetArgs),
    /// Decode head-map dumps into MOT detection rows.
    Decode(commands::DecodeArgs),
    /// Apply streamlining passes to an operator graph.
    Streamline(commands::StreamlineArgs),
    /// Simulate a streaming graph's FIFOs.
    SimFifo(commands::SimFifoArgs),
    /// Write the built-in reference graphs and a synthetic sequence.
    Fixtures(commands::FixturesArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Track(a) => commands::track(&a),
        Command::EvalMot(a) => commands::eval_mot(&a),
        Command::EvalDet(a) => commands::eval_det(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Streamline(a) => commands::streamline(&a),
        Command::SimFifo(a) => commands::sim_fifo(&a),
        Command::Fixtures(a) => commands::fixtures(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Io(_) => ExitCode::from(1),
                CliError::Invalid(_) => ExitCode::from(2),
            }
        }
    }
}

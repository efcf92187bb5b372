mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Lane-segment perception pipeline on synthetic multi-camera scenes.
#[derive(Parser, Debug)]
#[command(name = "laneseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (optionally a train/test split).
    GenData(GenDataArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training from a checkpoint.
    Resume(ResumeArgs),
    /// Evaluate a checkpoint (or the groundtruth oracle) on a dataset.
    Eval(EvalArgs),
    /// Per-layer multiply-accumulate report of a backbone preset.
    Flops(FlopsArgs),
    /// Train and evaluate every experiment preset and print a comparison table.
    Suite(SuiteArgs),
    /// Render groundtruth and predicted BEV lane maps of one frame as SVG.
    Viz(VizArgs),
}

/// Experiment configuration: preset, then config file, then `--set` overrides.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Experiment preset (baseline-3:6, shallow-backbone, 2:4, 4:8).
    #[arg(long)]
    preset: Option<String>,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Seed of the first scene; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes.
    #[arg(long)]
    scenes: usize,
    /// Train:test split, e.g. 12:4; writes `train/` and `test/` under the output.
    #[arg(long, value_name = "TRAIN:TEST")]
    split: Option<String>,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training set (sets `dataset_dir`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory (sets `checkpoint_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ResumeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the `config.txt` saved next to the checkpoint.
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restart Adam moments from zero (diagnostic).
    #[arg(long)]
    drop_optimizer_state: bool,
    /// Reseed the shuffle RNG (diagnostic).
    #[arg(long)]
    drop_rng_state: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the groundtruth against itself.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    config: ConfigArgs,
    /// Report file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// Backbone preset (resnet18-shape, resnet50-shape, toy-basic, toy-bottleneck).
    #[arg(long, default_value = "resnet50-shape")]
    preset: String,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated presets; defaults to all four.
    #[arg(long, value_delimiter = ',')]
    presets: Vec<String>,
    /// Override applied to every preset; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    scene: String,
    /// Frame index; defaults to the last frame.
    #[arg(long)]
    frame: Option<usize>,
    /// Without a checkpoint only the groundtruth panel is drawn.
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Draw the groundtruth as the prediction panel.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    config: ConfigArgs,
    /// SVG file.
    #[arg(long)]
    out: PathBuf,
}

/// Invalid invocation detected after argument parsing (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Resume(a) => commands::resume(a),
        Command::Eval(a) => commands::eval(a),
        Command::Flops(a) => commands::flops(a),
        Command::Suite(a) => commands::suite(a),
        Command::Viz(a) => commands::viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

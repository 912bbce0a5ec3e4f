mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multi-frame pose-guided motion transfer on synthetic figure videos.
#[derive(Parser, Debug)]
#[command(name = "vidfuse", version, about)]
pub struct Cli {
    /// Root seed; every subsystem seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory of the command.
    #[arg(long, global = true, default_value = "vidfuse-run")]
    pub out: PathBuf,
    /// Override one configuration key, e.g. `--set train.k=2`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset with poses, masks and flows.
    SynthData,
    /// Pretrain the single-frame baseline.
    TrainBaseline(TrainBaselineArgs),
    /// Train fusion and heads on top of a frozen baseline.
    TrainFull(TrainFullArgs),
    /// Render one clip's appearance in another clip's motion.
    Transfer(TransferArgs),
    /// Motion transfer with the background taken from a third clip.
    BgSubstitute(BgSubstituteArgs),
    /// Score a trained run.
    Evaluate(EvaluateArgs),
    /// Synthesize, pretrain, train, transfer and evaluate at 32x32.
    Demo,
}

#[derive(Args, Debug)]
pub struct TrainBaselineArgs {
    /// Dataset directory written by `synth-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from a baseline checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainFullArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Baseline checkpoint, or the directory of a `train-baseline` run.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Continue from a full-model checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Directory with `<clip_id>/NNNNN.flo` flows; ground truth otherwise.
    #[arg(long)]
    pub flows: Option<PathBuf>,
    /// Perceptual feature weights in safetensors form.
    #[arg(long)]
    pub perceptual: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Full-model checkpoint, or a run directory.
    #[arg(long, required = true)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Clip providing the appearance; the first clip by default.
    #[arg(long)]
    pub source_clip: Option<String>,
    /// Clip providing the motion; the source clip by default.
    #[arg(long)]
    pub target_clip: Option<String>,
    /// Comma-separated source frame indices; the run's fixed sources by default.
    #[arg(long, value_delimiter = ',')]
    pub sources: Option<Vec<usize>>,
    /// Write the attention maps of every frame.
    #[arg(long)]
    pub dump_attention: bool,
    /// Write foreground, background and mask of every frame.
    #[arg(long)]
    pub dump_intermediates: bool,
}

#[derive(Args, Debug)]
pub struct BgSubstituteArgs {
    #[arg(long, required = true)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub source_clip: Option<String>,
    #[arg(long)]
    pub target_clip: Option<String>,
    /// Clip whose frames drive the background branch.
    #[arg(long)]
    pub background_clip: String,
    #[arg(long)]
    pub dump_intermediates: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Run directory or checkpoint file.
    #[arg(long, required = true)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `same_video` or `cross_video`.
    #[arg(long, default_value = "same_video")]
    pub mode: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

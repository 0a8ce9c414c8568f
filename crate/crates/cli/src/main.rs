//! `maevit`: pre-training, fine-tuning, evaluation, reconstruction dumps,
//! cost inspection and gradient checks from one binary.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "maevit", version, about = "Masked-autoencoder vision transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Masked-autoencoder pre-training.
    Pretrain(RunArgs),
    /// Classification fine-tuning, optionally from a pre-trained checkpoint.
    Finetune(RunArgs),
    /// Loss and top-1 accuracy of a checkpoint on a data split.
    Eval(EvalArgs),
    /// Original | masked | reconstruction triptychs from a pre-training checkpoint.
    Reconstruct(RunArgs),
    /// Parameter and MAC counts of the configured architecture.
    Inspect(RunArgs),
    /// Finite-difference gradient checks of every primitive and a small MAE.
    Gradcheck(GradcheckArgs),
    /// Writes a procedural dataset in the CIFAR binary layout.
    SynthData(SynthArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// `key = value` config file applied over the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding the CIFAR binary files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and images.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetArg>,
    /// Checkpoint to start from (fine-tune) or to read (eval, reconstruct).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint of an interrupted run to continue.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Single-threaded data loading and no wall-clock column.
    #[arg(long)]
    pub deterministic: bool,
    /// `key=value` overrides, applied last.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = DatasetArg::C10)]
    pub dataset: DatasetArg,
    #[arg(long, default_value_t = 1000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetArg {
    C10,
    C100,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}

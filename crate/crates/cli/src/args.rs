use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use flowcond::data::DatasetKind;

use crate::config::{Method, OperatorKind};

#[derive(Debug, Parser)]
#[command(name = "flowcond", version, about = "Flow-matching priors and training-free conditional sampling on 2D toys")]
pub struct Cli {
    /// TOML experiment config; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the config seed and FLOWCOND_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for SGLD chains.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a toy dataset to CSV.
    GenData(GenDataArgs),
    /// Fit the velocity field; writes a checkpoint and a loss CSV.
    Train(TrainArgs),
    /// Unconditional samples from a checkpoint.
    Sample(SampleArgs),
    /// Conditional samples for one observation.
    Condition(ConditionArgs),
    /// W1 to the reference posterior and measurement MAE, as JSON.
    Evaluate(EvaluateArgs),
    /// Guidance-strength sweep over b = 1, 3, 10 for Grad and Grad-Free.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub kind: Option<DatasetKind>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to the checkpoint path with extension `loss.csv`.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ObservationArgs {
    #[arg(long, value_enum)]
    pub operator: Option<OperatorKind>,
    #[arg(long, allow_negative_numbers = true)]
    pub y: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ConditionArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Source draws for source-space methods.
    #[arg(long)]
    pub sources_out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Guidance strength for grad and grad-free.
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub observation: ObservationArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// Reference posterior CSV; built from the data generator when omitted.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub observation: ObservationArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub observation: ObservationArgs,
}

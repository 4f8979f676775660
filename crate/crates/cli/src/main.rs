use std::path::PathBuf;
use std::process::ExitCode;

use boottod_core::{Error, ErrorKind};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

mod ablate;
mod commands;
mod config;
mod corpus;

#[derive(Parser, Debug)]
#[command(name = "boottod", version, about = "Self-bootstrapping dialogue encoder pre-training and evaluation")]
struct Cli {
    /// Log verbosity: -v for progress, -vv for debug output.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic task-oriented dialogue corpus.
    GenCorpus(GenCorpusArgs),
    /// Pre-train an encoder and write a checkpoint with its training log.
    Pretrain(PretrainArgs),
    /// Fine-tune on the train split and report on the dev split.
    Finetune(EvalArgs),
    /// Fine-tune on the train split and report on the test split.
    Eval(EvalArgs),
    /// Run a pre-train + evaluate matrix over one ablation axis.
    Ablate(AblateArgs),
    /// Print a checkpoint manifest and verify its parameter checksum.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, env = "BOOTTOD_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "BOOTTOD_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "BOOTTOD_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub intents: Option<usize>,
    #[arg(long)]
    pub dialogues: Option<usize>,
    #[arg(long)]
    pub templates: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long, env = "BOOTTOD_CORPUS")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ObjectiveArgs {
    /// Number of topmost layers aligned.
    #[arg(long)]
    pub k: Option<usize>,
    /// Response length mode: 0, all, fix, cap, or a positive cap.
    #[arg(long)]
    pub p_mode: Option<String>,
    /// Maximum response length in utterances (implies cap mode).
    #[arg(long)]
    pub p_cap: Option<usize>,
    #[arg(long)]
    pub no_mlm: bool,
    #[arg(long)]
    pub no_cls_align: bool,
    #[arg(long)]
    pub no_mask_align: bool,
    #[arg(long)]
    pub no_stop_gradient: bool,
    /// Drop the predictor head from the online branch.
    #[arg(long)]
    pub no_predictor: bool,
    #[arg(long, value_enum)]
    pub distance: Option<DistanceArg>,
    /// L2-normalize representations before the alignment distance.
    #[arg(long)]
    pub normalize: Option<bool>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceArg {
    Euclidean,
    Squared,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Intent,
    Act,
    ResponseSelection,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Intent => "intent",
            Task::Act => "act",
            Task::ResponseSelection => "response-selection",
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long, env = "BOOTTOD_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Pre-trained checkpoint directory.
    #[arg(long, env = "BOOTTOD_CHECKPOINT", conflicts_with = "random_init")]
    pub checkpoint: Option<PathBuf>,
    /// Baseline: an untrained encoder of the configured shape.
    #[arg(long)]
    pub random_init: bool,
    /// Fine-tuning steps (0 evaluates the encoder as is).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub freeze_encoder: bool,
    #[arg(long)]
    pub pool_size: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Components,
    P,
    K,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Axis values: comma list (0,3,all,fix) or a range such as 1..2 or 1..L.
    #[arg(long)]
    pub values: Option<String>,
    /// Seeds shared by every configuration (default: the run seed).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub tasks: Vec<Task>,
    /// Cells run concurrently; results do not depend on this value.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Reuse cell results already persisted in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune_eval(a, "dev", "finetune"),
        Command::Eval(a) => commands::finetune_eval(a, "test", "eval"),
        Command::Ablate(a) => ablate::run(a),
        Command::InspectCheckpoint(a) => commands::inspect_checkpoint(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

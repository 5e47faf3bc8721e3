//! `gridroad`: synthesise or ingest trajectories, pretrain, fine-tune and
//! evaluate from the command line.

mod commands;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridroad_core::model::Variant;

#[derive(Parser, Debug)]
#[command(name = "gridroad", version, about = "Grid and road trajectory representation learning")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic road network and GPS trajectories.
    Synth(SynthArgs),
    /// Map-match GPS trajectories and write a sample cache.
    Ingest(IngestArgs),
    /// Pretrain a model and write its checkpoint and loss trace.
    Pretrain(PretrainArgs),
    /// Fine-tune a travel-time head and report test-split errors.
    FinetuneTte(FinetuneArgs),
    /// Fine-tune a classification head and report test-split F1.
    FinetuneCls(ClassifyArgs),
    /// Build a most-similar-trajectory benchmark.
    BenchSim(BenchArgs),
    /// Evaluate a checkpoint on a similarity benchmark.
    EvalSim(EvalSimArgs),
    /// Write one representation vector per cached trajectory.
    Encode(EncodeArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for the network CSVs and trajectory files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trajectories: Option<usize>,
    /// Positional noise, metres.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Seconds between fixes.
    #[arg(long)]
    pub interval: Option<f64>,
}

/// Directory holding `segments.csv` and `edges.csv`.
#[derive(Args, Debug)]
pub struct NetworkArg {
    #[arg(long)]
    pub network: PathBuf,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[command(flatten)]
    pub net: NetworkArg,
    /// GPS JSON-lines files; may be repeated.
    #[arg(long, required = true)]
    pub gps: Vec<PathBuf>,
    /// Sample cache to write; metadata goes to `<out>.meta.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cell_size: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    Full,
    RoadOnly,
    GridOnly,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::RoadOnly => Variant::RoadOnly,
            VariantArg::GridOnly => Variant::GridOnly,
        }
    }
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub net: NetworkArg,
    #[arg(long)]
    pub cache: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Representation size `d`; the hidden size follows as `2d`.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub net: NetworkArg,
    #[arg(long)]
    pub cache: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fine-tuned checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Defaults to `<out>.metrics.json`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Freeze the encoders and train only the head.
    #[arg(long)]
    pub head_only: bool,
    /// Expected representation size; a checkpoint of another size is rejected.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: FinetuneArgs,
    /// Number of classes; defaults to the synthetic generator's.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub net: NetworkArg,
    /// Raw GPS file the queries are drawn from.
    #[arg(long)]
    pub gps: PathBuf,
    /// Sample cache the negatives are drawn from.
    #[arg(long)]
    pub negatives: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long = "num-negatives")]
    pub num_negatives: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalSimArgs {
    #[command(flatten)]
    pub net: NetworkArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bench: PathBuf,
    /// Metrics JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub net: NetworkArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    /// JSON lines of `{id, vector}`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Entries sampled per parameter group.
    #[arg(long, default_value_t = 24)]
    pub entries: usize,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Pretrain(_) => "pretrain",
            Command::FinetuneTte(_) => "finetune-tte",
            Command::FinetuneCls(_) => "finetune-cls",
            Command::BenchSim(_) => "bench-sim",
            Command::EvalSim(_) => "eval-sim",
            Command::Encode(_) => "encode",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    let start = Instant::now();
    let result = commands::run(&cli);
    log::info!("{name} finished in {:.2}s", start.elapsed().as_secs_f64());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use psm::ppsm::WeightStrategy;

#[derive(Debug, Parser)]
#[command(
    name = "psm",
    version,
    about = "Positive and negative sample mining for contrastive learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write a run directory.
    Pretrain(PretrainArgs),
    /// Score a checkpoint's encoder with a kNN or linear probe.
    Probe(ProbeArgs),
    /// Write purity or gradient-profile CSVs for a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Mine positives or negatives for query embeddings against a bank dump.
    Mine(MineArgs),
    /// Run an ablation grid and write ablation.csv.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file (.csv, otherwise the binary dataset format).
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Held-out dataset used by probes. Without it `--data` is split 4:1.
    #[arg(long, requires = "data")]
    pub test: Option<PathBuf>,
    /// Gaussian clusters, e.g. `c4,d32,n512,sep6[,t128][,s7]`: classes,
    /// dimension, train rows per class, separation, test rows per class,
    /// data seed.
    #[arg(long)]
    pub synthetic: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mined positives per query.
    #[arg(long)]
    pub k: Option<usize>,
    /// Negative-mining density.
    #[arg(long)]
    pub a: Option<f64>,
    /// Weight of the hard loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Temperature.
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub bank_capacity: Option<usize>,
    #[arg(long)]
    pub strategy: Option<WeightStrategy>,
    /// Probe every this many epochs (the last epoch is always probed).
    #[arg(long)]
    pub probe_every: Option<usize>,
    #[arg(long)]
    pub no_pnsm: bool,
    #[arg(long)]
    pub no_soft: bool,
    #[arg(long)]
    pub no_hard: bool,
    #[arg(long)]
    pub symmetrize: bool,
    /// Symmetric InfoNCE on a single branch instead of the mining pipeline.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// JSON training config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeMode {
    Knn,
    Linear,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = ProbeMode::Knn)]
    pub mode: ProbeMode,
    #[arg(long, default_value_t = psm::diagnostics::DEFAULT_KNN)]
    pub knn_k: usize,
    /// Gradient-descent epochs of the linear probe.
    #[arg(long, default_value_t = 300)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub probe_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Diagnostic {
    Purity,
    Gradients,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub what: Diagnostic,
    #[arg(long)]
    pub out: PathBuf,
    /// Bank dump; defaults to `bank.psmb` next to the checkpoint.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Training config; defaults to `config.json` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of ranks in the gradient profile.
    #[arg(long, default_value_t = psm::diagnostics::DEFAULT_PROFILE_DEPTH)]
    pub depth: usize,
    /// Augmentation seed; defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MineMode {
    Positive,
    Negative,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Query embeddings in a dataset file; rows are normalized before use.
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long, value_enum)]
    pub mode: MineMode,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub a: f64,
    /// Positive similarity anchoring negative mining; defaults to each
    /// query's nearest bank entry.
    #[arg(long, allow_negative_numbers = true)]
    pub s_pos: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Weighting strategies v0..v4.
    Strategies,
    /// Loss and mining components plus the baseline.
    Components,
    /// One hyper-parameter over `--values`.
    Sweep,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub grid: Grid,
    /// Sweep parameter: k, a, lambda or t.
    #[arg(long, required_if_eq("grid", "sweep"))]
    pub param: Option<String>,
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        required_if_eq("grid", "sweep")
    )]
    pub values: Vec<f64>,
    /// Seeds to repeat every cell with; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

//! `shapnas`: Shapley-value architecture search from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;

use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "shapnas",
    version,
    about = "Shapley-value operation attribution and architecture search"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Search space: preset name (nasbench201-cell, darts-cell) or JSON file.
    #[arg(long, global = true, default_value = "nasbench201-cell")]
    pub space: String,
    /// Synthetic game: preset (additive, planted, annealed, steep), preset:seed, or JSON file.
    #[arg(long, global = true, default_value = "planted")]
    pub game: String,
    /// External evaluator command line; replaces the synthetic game.
    #[arg(long, global = true)]
    pub evaluator: Option<String>,
    /// Seed for sampling, permutations and sweep runs [default: 0, or the
    /// seed in --config].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for result files; created if missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (concurrent runs for `sweep`).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Seconds to wait for an evaluator reply (train requests excepted).
    #[arg(long, global = true, default_value_t = 30)]
    pub eval_timeout: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the search and write the genotype, history and checkpoint.
    Search(SearchCmd),
    /// Estimate Shapley values once.
    Shapley {
        #[command(subcommand)]
        estimator: ShapleyCmd,
    },
    /// Run searches over a hyperparameter grid on the synthetic game.
    Sweep(SweepCmd),
    /// Rank-correlate operation strength with architecture value.
    Correlate(CorrelateCmd),
    /// Drop matrix for removing one operation on each of two edges.
    Pairwise(PairwiseCmd),
    /// Per-epoch alpha and attribution table from a checkpoint.
    ExportHistory(ExportCmd),
    /// Act as an evaluator on stdin/stdout, backed by the synthetic game.
    Serve(ServeCmd),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scan {
    FromFull,
    FromEmpty,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Policy {
    ZeroFill,
    Skip,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Full,
    DiscretizeOnly,
    FrozenAlpha,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Norm {
    Global,
    PerEdge,
}

/// Truncation threshold; `None` when switched off.
#[derive(Debug, Clone, Copy)]
pub struct Eta(pub Option<f64>);

/// `off` or a threshold.
pub fn parse_truncation(s: &str) -> Result<Eta, String> {
    match s {
        "off" | "none" => Ok(Eta(None)),
        _ => s
            .parse::<f64>()
            .map(|v| Eta(Some(v)))
            .map_err(|e| format!("`{s}`: {e}")),
    }
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("cfg").multiple(true)))]
pub struct EstimatorArgs {
    /// Permutations per estimate.
    #[arg(long, group = "cfg")]
    pub permutations: Option<usize>,
    /// Truncation threshold on the accuracy scale, or `off`.
    #[arg(long, value_parser = parse_truncation, group = "cfg")]
    pub truncation: Option<Eta>,
    #[arg(long, value_enum, group = "cfg")]
    pub scan: Option<Scan>,
    #[arg(long, value_enum, group = "cfg")]
    pub policy: Option<Policy>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Search configuration as JSON; flags below override its fields.
    #[arg(long, group = "cfg")]
    pub config: Option<PathBuf>,
    #[arg(long, group = "cfg")]
    pub epochs: Option<usize>,
    #[arg(long, group = "cfg")]
    pub warmup: Option<usize>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    /// Step size epsilon.
    #[arg(long, group = "cfg")]
    pub step_size: Option<f64>,
    /// Momentum coefficient mu.
    #[arg(long, group = "cfg")]
    pub momentum: Option<f64>,
    #[arg(long, value_enum, group = "cfg")]
    pub norm: Option<Norm>,
    #[arg(long, value_enum, group = "cfg")]
    pub mode: Option<Mode>,
    /// Epochs between alpha updates after warm-up.
    #[arg(long, group = "cfg")]
    pub update_every: Option<usize>,
    /// Evaluate every coalition afresh instead of caching per generation.
    #[arg(long, group = "cfg")]
    pub no_cache: bool,
}

#[derive(Debug, Args)]
pub struct SearchCmd {
    #[command(flatten)]
    pub search: SearchArgs,
    /// Continue from a checkpoint with its stored configuration.
    #[arg(long, conflicts_with = "cfg")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ShapleyCmd {
    /// Enumerate every coalition.
    Exact {
        /// Largest player count accepted.
        #[arg(long, default_value_t = shapnas::shapley::DEFAULT_EXACT_CAP)]
        cap: usize,
        /// Training steps before estimating.
        #[arg(long, default_value_t = 0)]
        train_steps: u32,
    },
    /// Truncated Monte-Carlo permutation sampling.
    Mc {
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[arg(long, default_value_t = 0)]
        train_steps: u32,
    },
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    pub search: SearchArgs,
    /// Permutation counts to try, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub grid_permutations: Vec<usize>,
    /// Truncation thresholds to try (`off` allowed).
    #[arg(long, value_delimiter = ',', value_parser = parse_truncation)]
    pub grid_truncation: Vec<Eta>,
    #[arg(long, value_delimiter = ',')]
    pub grid_momentum: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub grid_step_size: Vec<f64>,
    /// Seeded runs per cell, seeds `seed..seed+runs`.
    #[arg(long, default_value_t = 20)]
    pub runs: u64,
}

#[derive(Debug, Args)]
pub struct CorrelateCmd {
    /// Checkpoint whose alpha is correlated; without it a search runs first.
    #[arg(long, conflicts_with = "cfg")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Architectures to sample.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct PairwiseCmd {
    /// Two edge indices, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
    pub edges: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub train_steps: u32,
}

#[derive(Debug, Args)]
pub struct ExportCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeCmd {
    /// Answer with |S|/n instead of the game value.
    #[arg(long)]
    pub echo: bool,
    /// Evaluate requests the client may keep in flight.
    #[arg(long, default_value_t = 1)]
    pub window: usize,
    /// Injected misbehavior: wrong-id, bad-accuracy, bad-players, hang-on-train, die-on-train:N.
    #[arg(long)]
    pub fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("shapnas: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `shapnas --help` for usage");
            }
            e.exit_code()
        }
    }
}

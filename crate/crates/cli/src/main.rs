//! `cpcomp`: low-rank compression of convolutional networks.
//!
//! Reports go to stdout as tab-separated tables; diagnostics go to stderr.
//! Exit codes: 0 success, 1 usage/parse/IO error, 2 invalid ranks,
//! 3 training diverged, 4 verification failed.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "cpcomp", version, about = "CP/TPM and SVD compression of convolutional networks")]
struct Cli {
    /// TOML file overriding the built-in defaults (see `cpcomp config`).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a fresh model file.
    Init(InitArgs),
    /// Decompose a model's conv and fc layers and report the savings.
    Decompose(DecomposeArgs),
    /// Print weight and multiply counts of a model.
    Report(ReportArgs),
    /// Measure each layer's accuracy loss under a fixed low-rank probe.
    Probe(ProbeArgs),
    /// Split rank budgets across layers in proportion to probe losses.
    Allocate(AllocateArgs),
    /// Compress a network on the built-in task with fine-tuning.
    Train(TrainArgs),
    /// Run the pipeline-equivalence and round-trip self-checks.
    Verify(VerifyArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitKind {
    /// Small random network with some layers already decomposed.
    Random,
    /// The built-in task's reference architecture, untrained.
    Toy,
    /// The reference architecture trained on the built-in task.
    Trained,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = InitKind::Random)]
    pub kind: InitKind,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Alexnet,
}

/// Where ranks come from.
#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct RankSource {
    /// `layer = rank` lines; layers not listed keep their weights.
    #[arg(long, value_name = "FILE")]
    pub ranks: Option<PathBuf>,
    /// Per-group budgets, e.g. `conv=750,fc=900`.
    #[arg(long, value_name = "conv=N,fc=M")]
    pub rank_budget: Option<String>,
    /// Keep every layer at full rank (no factorization).
    #[arg(long)]
    pub full_rank: bool,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Input model file.
    #[arg(long, value_name = "FILE", required_unless_present = "arch", conflicts_with = "arch")]
    pub model: Option<PathBuf>,
    /// Output model file.
    #[arg(long, value_name = "FILE", requires = "model")]
    pub out: Option<PathBuf>,
    /// Built-in architecture preset instead of a model file.
    #[arg(long, value_enum, requires = "analytic_only")]
    pub arch: Option<Arch>,
    /// Count weights and multiplies from layer shapes only.
    #[arg(long, requires = "arch")]
    pub analytic_only: bool,
    #[command(flatten)]
    pub source: RankSource,
    /// Probe report used to split `--rank-budget`; without it the budget
    /// is split evenly.
    #[arg(long, value_name = "FILE", requires = "rank_budget")]
    pub sensitivity: Option<PathBuf>,
    /// Accounting of grouped and input layers for `--arch alexnet`.
    #[arg(long, value_name = "fused-input|per-group")]
    pub convention: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_name = "FILE", required_unless_present = "arch", conflicts_with = "arch")]
    pub model: Option<PathBuf>,
    /// Uncompressed accounting of a built-in architecture.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Model trained on the built-in task.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long)]
    pub probe_rank: Option<usize>,
    /// Fine-tuning epochs after each probe decomposition.
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// Output of `cpcomp probe`, or any table in the same format.
    #[arg(long, value_name = "FILE")]
    pub sensitivity: PathBuf,
    #[arg(long, value_name = "conv=N,fc=M")]
    pub rank_budget: String,
    /// Also write the ranks file here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    Iterative,
    Oneshot,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Iterative => "iterative",
            Schedule::Oneshot => "oneshot",
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Schedule::Iterative)]
    pub schedule: Schedule,
    /// Starting model; defaults to the reference network trained from scratch.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Ranks file; defaults to `schedule.rank_fraction` of each layer's full rank.
    #[arg(long, value_name = "FILE")]
    pub ranks: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs_per_stage: Option<usize>,
    #[arg(long)]
    pub lr_step: Option<usize>,
    /// Stage log as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Compressed model.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Model to check; a random one is generated when omitted.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Init(a) => commands::init(&cfg, a),
        Command::Decompose(a) => commands::decompose(&cfg, a),
        Command::Report(a) => commands::report(a),
        Command::Probe(a) => commands::probe(&cfg, a),
        Command::Allocate(a) => commands::allocate(a),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Verify(a) => commands::verify(&cfg, a),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

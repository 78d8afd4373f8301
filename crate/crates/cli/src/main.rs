//! `sgnn`: prepare encrypted graphs, deal triples, and run secure training,
//! inference and primitive benchmarks across three parties.

mod bench;
mod run;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sgnn::prims::ApproxConfig;
use sgnn::sgcn::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] sgnn::Error),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Usage(String),
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "sgnn",
    version,
    about = "Three-party secure GCN training over secret-shared graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a dataset, pad and share it for P1 and P2.
    Prepare(PrepareArgs),
    /// Deal arithmetic and binary triples ahead of a run.
    Deal(DealArgs),
    /// Train the two-layer GCN on prepared shares.
    Train(TrainArgs),
    /// Class probabilities for chosen nodes under a trained model.
    Infer(InferArgs),
    /// Per-primitive cost tables.
    Bench(bench::BenchArgs),
    /// Write the oracle-derived constants and the toy training record.
    Fixtures(FixturesArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Inprocess,
    Tcp,
}

/// Topology, party role, seed and network model of a session.
#[derive(Args, Debug, Clone, Serialize)]
pub struct SessionArgs {
    /// Fixes every random choice of the run.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Inprocess)]
    pub mode: Mode,
    /// This process's party in TCP mode.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub party: Option<u8>,
    /// Own address in TCP mode.
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    /// Addresses of the other two parties in TCP mode, lower party first.
    #[arg(long, num_args = 1..)]
    pub connect: Vec<SocketAddr>,
    #[arg(long, default_value_t = 15)]
    pub frac_bits: u32,
    /// Simulated one-way latency for reported times.
    #[arg(long, default_value_t = 0.22)]
    pub latency_ms: f64,
    /// Simulated bandwidth for reported times.
    #[arg(long, default_value_t = 625e6)]
    pub bandwidth_bytes_per_s: f64,
    #[arg(long, default_value_t = 600)]
    pub timeout_secs: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ApproxArgs {
    #[arg(long, default_value_t = 13)]
    pub recip_iters: usize,
    #[arg(long, default_value_t = 8)]
    pub exp_squarings: u32,
    #[arg(long, default_value_t = 18)]
    pub invsqrt_iters: usize,
    #[arg(long, default_value_t = 3)]
    pub ln_iters: usize,
    #[arg(long, default_value_t = 8)]
    pub ln_terms: usize,
    #[arg(long, default_value_t = 1.5)]
    pub invsqrt_init_scale: f64,
}

impl ApproxArgs {
    pub fn config(&self) -> ApproxConfig {
        ApproxConfig {
            recip_iters: self.recip_iters,
            exp_squarings: self.exp_squarings,
            invsqrt_iters: self.invsqrt_iters,
            ln_iters: self.ln_iters,
            ln_terms: self.ln_terms,
            invsqrt_init_scale: self.invsqrt_init_scale,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 0.2)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.02)]
    pub alpha: f64,
    #[arg(long, default_value_t = 5)]
    pub beta: usize,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    /// Output gradient as `Z - T` instead of the chained softmax Jacobian.
    #[arg(long)]
    pub fused_grad: bool,
    /// Reconstruct and report the loss of every epoch.
    #[arg(long)]
    pub debug_loss: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct PrepareArgs {
    /// `cora`, `citeseer`, `pubmed`, `toy`, `synthetic`, or a path prefix
    /// naming `<prefix>.content` and `<prefix>.cites`.
    #[arg(long)]
    pub dataset: String,
    /// Directory holding `cora/`, `citeseer/` and `pubmed/`.
    #[arg(long, env = "SGNN_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub labeled_per_class: usize,
    #[arg(long, default_value_t = 15)]
    pub frac_bits: u32,
    #[arg(long, default_value_t = 24)]
    pub nodes: usize,
    #[arg(long, default_value_t = 8)]
    pub features: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 3)]
    pub avg_degree: usize,
    #[arg(long, default_value_t = 0.8)]
    pub homophily: f64,
    #[arg(long)]
    pub weighted: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct DealArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Arithmetic (Beaver) triples.
    #[arg(long, default_value_t = 0)]
    pub arith: usize,
    /// Binary (AND) triples.
    #[arg(long, default_value_t = 0)]
    pub binary: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Output directory of `prepare`.
    #[arg(long)]
    pub shares: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from these model shares instead of a seeded initialization.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory of `deal`.
    #[arg(long)]
    pub offline: Option<PathBuf>,
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub approx: ApproxArgs,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            hidden: t.hidden,
            alpha: t.alpha,
            beta: t.beta,
            max_epochs: t.max_epochs,
            labeled_per_class: TrainConfig::default().labeled_per_class,
            approx: self.approx.config(),
            fused_grad: t.fused_grad,
            debug_loss: t.debug_loss,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub shares: PathBuf,
    /// Output directory of `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// 1-based node ids, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "all")]
    pub nodes: Vec<usize>,
    /// Query every node in one batch.
    #[arg(long)]
    pub all: bool,
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub approx: ApproxArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct FixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prepare(a) => run::prepare(a),
        Command::Deal(a) => run::deal(a),
        Command::Train(a) => run::train(a),
        Command::Infer(a) => run::infer(a),
        Command::Bench(a) => bench::bench(a),
        Command::Fixtures(a) => run::fixtures(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "qnetlab", version, about = "Random-graph and quantum-network experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalOpts {
    /// Master seed; every experiment derives its streams from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output file; stdout when omitted. A manifest is written next to it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Output format; each subcommand has its own default.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "QNETLAB_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Exact,
    Sampled,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fraction of G(N, c·N^z) samples containing a pattern, over N and z.
    Sweep(SweepArgs),
    /// Distribution of the degree-counting outcomes on |G_{N,p}⟩.
    PmDist(PmDistArgs),
    /// Run the subgraph-extraction protocol for a target.
    Protocol(ProtocolArgs),
    /// Run the protocol with a vacuum-emitting link source.
    Noise(NoiseArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    /// edge, path3, path4, triangle, square, k4 or custom:0-1,1-2,...
    #[arg(long)]
    pub pattern: String,
    /// Comma-separated node counts.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n_list: Vec<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub z_min: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub z_max: f64,
    #[arg(long)]
    pub z_step: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_coeff: f64,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PmDistArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub z: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_coeff: f64,
    #[arg(long, default_value_t = 400)]
    pub trials: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProtocolArgs {
    /// edge, path3, path4, triangle, square, k4 or custom:0-1,1-2,...
    #[arg(long)]
    pub target: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
    pub mode: ModeArg,
    /// Runs in sampled mode.
    #[arg(long, default_value_t = 1000)]
    pub runs: usize,
    /// Also write the JSON trace(s) here.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NoiseArgs {
    #[arg(long)]
    pub target: String,
    /// Probability that the source emits vacuum.
    #[arg(long)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1000)]
    pub runs: usize,
    /// Allowed probability that every retry fails.
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon_fail: f64,
}

//! Plan-driven experiment runner over `abr-core`.
//!
//! Every command reads a TOML plan, writes into an output directory and
//! stamps each CSV with a provenance line:
//! `# abrlab <version> plan_sha256=<hex> seed=<seed>[ overrides=...]`.

pub mod commands;
pub mod plan;

use std::path::PathBuf;

use abr_core::ea3c::TrainMode;
use abr_core::features::InputConfig;
use abr_core::online::Variant;
use abr_core::AbrError;
use clap::{Args, Parser, Subcommand};

pub use commands::run;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] AbrError),
    #[error("config error: {0}")]
    Config(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for data and file problems, 4 for
    /// numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                AbrError::Config(_) | AbrError::Spec(_) => 2,
                AbrError::Divergence(_) => 4,
                AbrError::InvalidTrace(_)
                | AbrError::Parse { .. }
                | AbrError::Validation(_)
                | AbrError::Checkpoint(_)
                | AbrError::Io { .. }
                | AbrError::Json(_)
                | AbrError::Csv(_) => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "abrlab", version, about = "Cross-layer adaptive streaming experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub args: GlobalArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample synthetic traces from the plan's chain.
    GenTraces,
    /// Cross- and auto-correlation table of a trace set.
    Analyze,
    /// Offline train/val/test and per-dataset online splits.
    Split,
    /// Train an actor-critic pair and write its checkpoint.
    TrainOffline,
    /// Tune a trained pair on a user's traces with progressive columns.
    TuneOnline,
    /// Evaluate a checkpoint, tuned checkpoint or MPC on a trace set.
    Eval,
    /// Architecture heatmap, history-length and QoE-weight sweeps.
    Sweep,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "joint" => Ok(TrainMode::Joint),
        "alternating" => Ok(TrainMode::Alternating),
        other => Err(format!("unknown mode {other:?} (expected joint or alternating)")),
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: AbrError| e.to_string())
}

fn parse_layers(s: &str) -> Result<InputConfig, String> {
    InputConfig::parse_list(s).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, Default, Args)]
pub struct GlobalArgs {
    /// Experiment plan (TOML).
    #[arg(long, global = true)]
    pub plan: Option<PathBuf>,
    /// Overrides the plan seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the plan output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// otp or otpv.
    #[arg(long, global = true, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// joint or alternating.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<TrainMode>,
    /// Comma-separated subset of mac,prb,mcs, or none.
    #[arg(long, global = true, value_parser = parse_layers)]
    pub lower_layers: Option<InputConfig>,
    /// History length k.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// MPC lookahead.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
}

impl GlobalArgs {
    /// Overrides that change outputs, in a fixed order.
    pub fn overrides(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(m) = self.mode {
            v.push(format!("mode={}", if m == TrainMode::Joint { "joint" } else { "alternating" }));
        }
        if let Some(x) = self.variant {
            v.push(format!("variant={x}"));
        }
        if let Some(l) = &self.lower_layers {
            v.push(format!("lower_layers={l}"));
        }
        if let Some(k) = self.k {
            v.push(format!("k={k}"));
        }
        if let Some(h) = self.horizon {
            v.push(format!("horizon={h}"));
        }
        v
    }
}

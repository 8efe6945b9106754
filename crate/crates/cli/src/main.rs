use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use shallowpi_core::distill::{AttnPlacement, AttnScope};
use shallowpi_core::format::FORMAT_VERSION;
use shallowpi_core::sim::Suite;

mod commands;
mod config;

use config::Staleness;

/// Configuration problem detected by the CLI itself; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Comma-separated list taken as a single flag value, so a repeated flag
/// replaces rather than extends it.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

#[derive(Parser, Debug)]
#[command(name = "shallowpi", about = "Train, distill, analyse and benchmark flow-matching policies")]
#[command(args_override_self = true, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (gen-data) or run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Roll out the scripted expert and write a demonstration dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        suite: Option<Suite>,
        #[arg(long)]
        codebook_seed: Option<u64>,
        #[arg(long)]
        chunk_len: Option<usize>,
    },
    /// Train a policy on the task loss alone.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Distill a teacher checkpoint into a shallower student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Student depth.
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda_task: Option<f64>,
        #[arg(long)]
        lambda_kd: Option<f64>,
        #[arg(long)]
        lambda_attn: Option<f64>,
        #[arg(long, value_parser = parse_placement)]
        placement: Option<AttnPlacement>,
        #[arg(long, value_parser = parse_scope)]
        scope: Option<AttnScope>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Closed-loop success rate of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        /// `auto` or a frame count.
        #[arg(long)]
        staleness: Option<Staleness>,
        /// Derive `auto` staleness from timing with this control period.
        #[arg(long)]
        control_period_ms: Option<f64>,
        /// Layers to bypass, comma separated.
        #[arg(long)]
        skip: Option<List<usize>>,
    },
    /// Adjacent-layer cosine similarity of action-token states.
    AnalyzeSimilarity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        taus: Option<List<f64>>,
        #[arg(long)]
        examples: Option<usize>,
    },
    /// Success-rate drop from skipping each layer alone.
    AnalyzeSensitivity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Success rate as layers are removed least-sensitive first.
    AnalyzeProgressive {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        max_removed: Option<usize>,
        /// Explicit removal order; otherwise a sensitivity sweep decides.
        #[arg(long)]
        order: Option<List<usize>>,
    },
    /// Inference latency across depth and visual-token grids.
    BenchLatency {
        #[command(flatten)]
        common: Common,
        /// Base depth.
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        depths: Option<List<usize>>,
        #[arg(long)]
        tokens: Option<List<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        diffusion_steps: Option<usize>,
        /// Also write bench.json with the environment descriptor.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug, Clone)]
pub struct EvalFlags {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub suite: Option<Suite>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

fn parse_placement(s: &str) -> Result<AttnPlacement, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("expected initial, middle or later, got `{s}`"))
}

fn parse_scope(s: &str) -> Result<AttnScope, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("expected action_only or all_tokens, got `{s}`"))
}

pub fn version_string() -> String {
    format!("{} (format {FORMAT_VERSION})", env!("CARGO_PKG_VERSION"))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<shallowpi_core::Error>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

/// The parser with the runtime version string attached.
fn command() -> clap::Command {
    static VERSION: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    Cli::command().version(VERSION.get_or_init(version_string).as_str())
}

fn main() -> ExitCode {
    let matches = command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

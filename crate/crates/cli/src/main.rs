//! `magvec` command-line interface.

mod bench;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use magvec::approx::PatchConfig;
use magvec::{BaseMetric, PadMode};

use crate::config::RunConfig;

/// Input was rejected before any computation ran.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "magvec", version, about = "Magnitude vectors of images and magnitude-based edge detection")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for image- and patch-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Magnitude vector of an image.
    Mag(commands::MagArgs),
    /// Closed-form versus dense weights of a one-dimensional step image.
    Analytic1d(commands::AnalyticArgs),
    /// Edge map of an image.
    Edges(commands::EdgeArgs),
    /// Train a pullback-metric autoencoder.
    Train(commands::TrainArgs),
    /// ODS/OIS/AP/R50 of predicted edge maps against labels.
    Eval(commands::EvalArgs),
    /// Betti curve of an edge map.
    Topo(commands::TopoArgs),
    /// Runtime and approximation quality of every magnitude method.
    Bench(bench::BenchArgs),
    /// Write a synthetic block dataset with exact edge labels.
    Synth(commands::SynthArgs),
}

/// Patch and metric flags shared by several commands.
#[derive(Args, Debug, Clone, Default)]
pub struct PatchArgs {
    /// Patch size as `H W`, or a single side for square patches.
    #[arg(long, num_args = 1..=2, value_names = ["H", "W"])]
    patch: Option<Vec<usize>>,
    #[arg(long)]
    patch_h: Option<usize>,
    #[arg(long)]
    patch_w: Option<usize>,
    /// Context pixels added on every side of a patch.
    #[arg(long)]
    overlap: Option<usize>,
    /// Border handling of context windows: replicate, zero or truncate.
    #[arg(long, value_parser = parse_pad)]
    pad: Option<PadMode>,
    /// Base metric: l1, l2 or hamming.
    #[arg(long)]
    base: Option<BaseMetric>,
    /// Multiplier on channel values.
    #[arg(long)]
    channel_weight: Option<f64>,
}

pub(crate) fn parse_pad(s: &str) -> Result<PadMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "replicate" => Ok(PadMode::Replicate),
        "zero" => Ok(PadMode::Zero),
        "truncate" => Ok(PadMode::Truncate),
        _ => Err(format!("unknown pad mode `{s}`")),
    }
}

impl PatchArgs {
    pub fn apply(&self, cfg: &mut PatchConfig) {
        if let Some(p) = &self.patch {
            cfg.patch_h = p[0];
            cfg.patch_w = *p.last().unwrap_or(&p[0]);
        }
        if let Some(p) = self.patch_h {
            cfg.patch_h = p;
        }
        if let Some(p) = self.patch_w {
            cfg.patch_w = p;
        }
        if let Some(o) = self.overlap {
            cfg.overlap = o;
        }
        if let Some(p) = self.pad {
            cfg.pad = p;
        }
        if let Some(b) = self.base {
            cfg.metric.base = b;
        }
        if let Some(s) = self.channel_weight {
            cfg.metric.channel_weight = s;
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<magvec::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(invalid("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    match cli.command {
        Command::Mag(a) => commands::mag(a, &cfg),
        Command::Analytic1d(a) => commands::analytic1d(a, &cfg),
        Command::Edges(a) => commands::edges(a, &cfg),
        Command::Train(a) => commands::train(a, &cfg),
        Command::Eval(a) => commands::eval(a, &cfg),
        Command::Topo(a) => commands::topo(a, &cfg),
        Command::Bench(a) => bench::bench(a, &cfg),
        Command::Synth(a) => commands::synth(a, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

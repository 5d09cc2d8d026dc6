//! Command-line stages of the diop pipeline and the local annotation service.
//!
//! Stages talk through files: `synth` writes a dataset directory, `derive`
//! writes instance rasters, `features` a CSV table, `train` a model file,
//! `eval` and `explain` JSON reports.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod serve;

pub use config::{Paths, PipelineConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Raster(#[from] diop::raster::RasterError),
    #[error(transparent)]
    Instance(#[from] diop::instances::InstanceError),
    #[error(transparent)]
    Feature(#[from] diop::features::FeatureError),
    #[error(transparent)]
    Learn(#[from] diop::learn::LearnError),
    #[error(transparent)]
    Explain(#[from] diop::explain::ExplainError),
    #[error(transparent)]
    Synth(#[from] diop::synth::SynthError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("benchmark median {median:.3} s exceeds the {limit:.3} s limit")]
    TooSlow { median: f64, limit: f64 },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Raster(_) => "raster",
            CliError::Instance(_) => "instances",
            CliError::Feature(_) => "features",
            CliError::Learn(_) => "learn",
            CliError::Explain(_) => "explain",
            CliError::Synth(_) => "synth",
            CliError::Json(_) => "json",
            CliError::TooSlow { .. } => "bench",
        }
    }

    /// 2 for bad invocations or configs, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }

    /// Single-line JSON error record written to stderr.
    pub fn error_line(&self) -> String {
        error_line(self.kind(), &self.to_string())
    }
}

pub fn error_line(kind: &str, message: &str) -> String {
    #[derive(Serialize)]
    struct Body<'a> {
        kind: &'a str,
        message: &'a str,
    }
    #[derive(Serialize)]
    struct Line<'a> {
        error: Body<'a>,
    }
    serde_json::to_string(&Line {
        error: Body { kind, message },
    })
    .expect("error line serializes")
}

#[derive(Debug, Parser)]
#[command(name = "diop", version, about = "Duct instance-oriented ROI classification pipeline")]
pub struct Cli {
    /// Pipeline config file (.toml or .json); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (synth: dataset seed; train/eval/explain: learner seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: rasters, box documents and a manifest.
    Synth(SynthArgs),
    /// Derive duct instances for every ROI of a dataset.
    Derive(DeriveArgs),
    /// Match two instance rasters by IoU.
    Match(MatchArgs),
    /// Extract three-level features into a CSV table.
    Features(FeaturesArgs),
    /// Train a model for one task and save it.
    Train(TrainArgs),
    /// Evaluate a task (LOOCV for binary tasks, split evaluation for fourway).
    Eval(EvalArgs),
    /// Shapley attributions of a trained model.
    Explain(ExplainArgs),
    /// Time three-level feature extraction on one synthetic ROI.
    Bench(BenchArgs),
    /// Serve derivation, feature and annotation endpoints on a local port.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// ROIs per diagnostic class.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Cc,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    SmallestBox,
    NearestCenter,
    FirstBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConnectivityArg {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Mean,
    AreaWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Roi,
    Box,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for instance rasters and sidecars.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Owner of pixels covered by several boxes (weak method).
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    #[arg(long, value_enum)]
    pub connectivity: Option<ConnectivityArg>,
    /// Closing radius before labelling (cc method).
    #[arg(long)]
    pub closing_radius: Option<usize>,
    /// Smallest kept component (cc method).
    #[arg(long)]
    pub min_area: Option<usize>,
    /// Restrict to these ROI ids (repeatable).
    #[arg(long = "roi")]
    pub rois: Vec<String>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Report file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of instance rasters written by `derive`.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub connectivity: Option<ConnectivityArg>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
}

/// Dataset and learner flags shared by train and eval.
#[derive(Debug, Args)]
pub struct LearnArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// invasive-vs-noninvasive, atypia-dcis-vs-benign, dcis-vs-atypia or fourway.
    #[arg(long)]
    pub task: String,
    /// Feature levels to keep (default: all three).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub levels: Vec<LevelArg>,
    /// Append the duct count to the model input.
    #[arg(long)]
    pub include_duct_count: bool,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub pca_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub learn: LearnArgs,
    /// Model file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub learn: LearnArgs,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Background rows drawn from the training data.
    #[arg(long, default_value_t = diop::explain::DEFAULT_BACKGROUND)]
    pub background: usize,
    /// Rows to explain.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Explain this class instead of each ROI's predicted class.
    #[arg(long)]
    pub class: Option<String>,
    /// Rows of the printed global ranking.
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value_t = 50)]
    pub ducts: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Fail when the median exceeds this many seconds.
    #[arg(long)]
    pub max_seconds: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8787")]
    pub addr: String,
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    match cli.command {
        Command::Synth(a) => {
            if let Some(s) = cli.seed {
                config.synth.seed = s;
            }
            commands::synth(config, a)
        }
        command => {
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            match command {
                Command::Derive(a) => commands::derive(config, a),
                Command::Match(a) => commands::match_rasters(a),
                Command::Features(a) => commands::features(config, a),
                Command::Train(a) => commands::train(config, a),
                Command::Eval(a) => commands::eval(config, a),
                Command::Explain(a) => commands::explain(config, a),
                Command::Bench(a) => commands::bench(config, a),
                Command::Serve(a) => commands::serve(config, a),
                Command::Synth(_) => unreachable!(),
            }
        }
    }
}

/// `root/manifest.json`.
pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

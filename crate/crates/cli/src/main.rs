//! `panoloc`: file-based pipeline stages for synthetic localisation runs.
//!
//! Every option can also come from a JSON file given with `--config`; flags
//! given on the command line win. Exit codes: 0 success, 2 bad input,
//! 3 no frame could be localised.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "panoloc", version, about = "Synthetic panorama localisation pipeline")]
struct Cli {
    /// Seed for every randomised stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-frame stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file with default values for any option.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a city scene and a camera trajectory.
    Generate(GenerateArgs),
    /// Ray-cast ground-truth scene coordinates and labels for every pose.
    Render(RenderArgs),
    /// Fit per-instance whitening transforms.
    FitMap(FitMapArgs),
    /// Corrupt ground-truth frames into simulated predictions.
    PredictSim(PredictArgs),
    /// Estimate a pose for every predicted frame.
    Localize(LocalizeArgs),
    /// Score estimates and predictions against ground truth.
    Evaluate(EvaluateArgs),
}

/// Fills `None` fields of `self` from `fallback`.
trait Merge {
    fn merge(self, fallback: Self) -> Self;
}

macro_rules! mergeable {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl Merge for $name {
            fn merge(self, fallback: Self) -> Self {
                Self { $($field: self.$field.or(fallback.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateArgs {
    /// City layout: `small` (102 buildings) or `large` (827 buildings).
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the preset's building count.
    #[arg(long)]
    pub buildings: Option<usize>,
    /// Number of trajectory poses.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Also write a surface point cloud with this sample spacing (m).
    #[arg(long)]
    pub cloud_spacing: Option<f64>,
}
mergeable!(GenerateArgs { preset, buildings, frames, cloud_spacing });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Panorama width; the height is half of it.
    #[arg(long)]
    pub width: Option<usize>,
}
mergeable!(RenderArgs { scene, poses, width });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitMapArgs {
    /// Directory of rendered ground-truth frames.
    #[arg(long, conflicts_with = "ply")]
    pub frames: Option<PathBuf>,
    /// ASCII PLY cloud with x, y, z and instance_label.
    #[arg(long)]
    pub ply: Option<PathBuf>,
}
mergeable!(FitMapArgs { frames, ply });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictArgs {
    /// Directory of ground-truth frames.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Scene file bounding the outlier volume; without it the volume comes
    /// from the ground-truth coordinates.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Gaussian noise on scene coordinates (m).
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub outlier_rate: Option<f64>,
    #[arg(long)]
    pub flip_rate: Option<f64>,
}
mergeable!(PredictArgs { frames, map, scene, sigma, outlier_rate, flip_rate });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeArgs {
    /// Directory of predicted frames.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub threshold_deg: Option<f64>,
    /// Correspondences kept per frame.
    #[arg(long)]
    pub max_correspondences: Option<usize>,
    /// Read world coordinates (`coords`) instead of unwhitening local ones (`local`).
    #[arg(long)]
    pub source: Option<String>,
}
mergeable!(LocalizeArgs { frames, map, iterations, threshold_deg, max_correspondences, source });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    /// Ground-truth pose file.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Directory of predicted frames.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Directory of ground-truth frames; defaults to `--frames`.
    #[arg(long, requires = "frames")]
    pub gt_frames: Option<PathBuf>,
    /// Extra pose-error percentiles, e.g. `--percentiles 80,90`.
    #[arg(long, value_delimiter = ',')]
    pub percentiles: Option<Vec<f64>>,
    /// Largest distance on the accuracy curve (m).
    #[arg(long)]
    pub roc_max: Option<f64>,
}
mergeable!(EvaluateArgs { estimates, poses, frames, gt_frames, percentiles, roc_max });

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
    generate: GenerateArgs,
    render: RenderArgs,
    #[serde(alias = "fit-map")]
    fit_map: FitMapArgs,
    #[serde(alias = "predict-sim")]
    predict_sim: PredictArgs,
    localize: LocalizeArgs,
    evaluate: EvaluateArgs,
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Common {
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    NoConsensus(usize),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::NoConsensus(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(e) => write!(f, "bad input: {e:#}"),
            Failure::NoConsensus(n) => write!(f, "no consensus on any of {n} frames"),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

/// Attach context and classify an error as bad input or an output failure.
pub trait Classify<T> {
    fn input(self, what: impl Display) -> Result<T, Failure>;
    fn output(self, what: impl Display) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self, what: impl Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into().context(what.to_string())))
    }

    fn output(self, what: impl Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Other(e.into().context(what.to_string())))
    }
}

pub fn bad_input(msg: impl Display) -> Failure {
    Failure::Input(anyhow::anyhow!("{msg}"))
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = std::fs::read_to_string(path).input(format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).input(format!("parsing config {}", path.display()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref())?;
    let common = Common {
        seed: cli.seed.or(cfg.seed).unwrap_or(0),
        out: cli.out.or(cfg.out).unwrap_or_else(|| PathBuf::from(".")),
    };
    if let Some(n) = cli.threads.or(cfg.threads) {
        if n == 0 {
            return Err(bad_input("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .output("starting worker pool")?;
    }
    std::fs::create_dir_all(&common.out).output(format!("creating {}", common.out.display()))?;
    match cli.command {
        Command::Generate(a) => commands::generate(&common, a.merge(cfg.generate)),
        Command::Render(a) => commands::render(&common, a.merge(cfg.render)),
        Command::FitMap(a) => commands::fit_map(&common, a.merge(cfg.fit_map)),
        Command::PredictSim(a) => commands::predict_sim(&common, a.merge(cfg.predict_sim)),
        Command::Localize(a) => commands::localize(&common, a.merge(cfg.localize)),
        Command::Evaluate(a) => commands::evaluate(&common, a.merge(cfg.evaluate)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("panoloc: {e}");
            ExitCode::from(e.code())
        }
    }
}

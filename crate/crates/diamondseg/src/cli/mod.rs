//! Command-line entry points over the whole toolchain: synthetic data,
//! preprocessing, training, evaluation, derived features, the labeling
//! pipeline, and the experiment grid.
//!
//! Conventions shared by every subcommand: data goes to files under
//! `--out` (`datasets/`, `models/`, `reports/`, `logs/`), stdout carries a
//! single summary line, stderr carries errors. Exit codes: 0 success,
//! 2 usage or config error, 3 declared runtime shortfall. Input
//! directories are never written to.

mod data;
mod experiment;
mod model;
mod synth;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, TrainConfig};
use crate::augment::AugmentPlan;
use crate::pipeline::PipelineConfig;
use crate::preprocess::PreprocessConfig;
use crate::synthgen::GrowthRunSpec;

pub use experiment::GridConfig;

/// Usage/config errors exit 2; a declared runtime shortfall (the pipeline
/// draining its pool before the assist gate passes) exits 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Shortfall(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Shortfall(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Shortfall(m) => m,
        }
    }
}

/// Anything that is not a shortfall is a usage/config failure.
pub(crate) fn usage<E: std::fmt::Display>(err: E) -> CliError {
    CliError::Usage(err.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "diamondseg",
    version,
    about = "Segmentation toolchain for in-situ diamond growth monitoring"
)]
pub struct Cli {
    /// TOML config file; sections override built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed. Required by synth, train, and pipeline.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; commands write datasets/, models/, reports/, logs/.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
    /// Worker threads for grid cells and augmentation.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Single-threaded, fixed-order reductions and zeroed wall times, so
    /// reruns are byte-identical.
    #[arg(long, global = true, action = ArgAction::SetTrue)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic growth runs into a dataset directory.
    Synth(SynthArgs),
    /// Resample, filter, crop, resize, and split a raw dataset.
    Preprocess(PreprocessArgs),
    /// Train one model on a preprocessed dataset.
    Train(TrainArgs),
    /// Score a saved model against a dataset split.
    Eval(EvalArgs),
    /// Extract the derived-feature time series of one growth run.
    Features(FeaturesArgs),
    /// Run the two-phase model-assisted labeling loop on a corpus.
    Pipeline(PipelineArgs),
    /// Train and score the family x resolution x augmentation-rate grid.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Run descriptions (TOML, `[[run]]` tables). Falls back to the
    /// config file's `[synth]` section.
    #[arg(long, value_name = "PATH")]
    pub spec: Option<PathBuf>,
    /// Dataset name under `<out>/datasets/`.
    #[arg(long, default_value = "synth")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Raw dataset directory (as written by `synth`).
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Target square resolution; defaults to the config's first one.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Dataset name under `<out>/datasets/`.
    #[arg(long, default_value = "proc")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preprocessed dataset directory with train/test tags.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// fcn8 | deeplabv3 | deeplabv3plus
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// cross_entropy | focal
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub focal_gamma: Option<f64>,
    /// Stem of the weights/history files; defaults to `<family>_<res>`.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Weights file written by `train` or `pipeline`.
    #[arg(long, value_name = "PATH")]
    pub weights: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// test | train | all
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Stem of the report files under `<out>/reports/`.
    #[arg(long, default_value = "eval")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Dataset directory holding the run.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Predict masks with this model instead of using stored masks.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Run id to extract when the dataset holds several runs.
    #[arg(long)]
    pub run: Option<String>,
    /// Also emit an SVG plot of the area series.
    #[arg(long, action = ArgAction::SetTrue)]
    pub svg: bool,
    /// Stem of the report files under `<out>/reports/`.
    #[arg(long, default_value = "features")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Preprocessed corpus at the pipeline's input resolution.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// temporal_stratified | entropy_topk
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training epochs per loop iteration.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Raw corpus; the grid preprocesses it per resolution.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Training epochs per cell.
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// The `--config` file: every section is optional and overrides defaults.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub synth: SynthSection,
    pub preprocess: PreprocessConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub augment: AugmentPlan,
    pub pipeline: PipelineConfig,
    pub grid: GridConfig,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub run: Vec<GrowthRunSpec>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Execution context every command receives.
pub(crate) struct Ctx {
    pub file: FileConfig,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub deterministic: bool,
}

impl Ctx {
    /// The master seed, for the commands that insist on one.
    pub fn required_seed(&self, command: &str) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage(format!("--seed is required for `{command}`")))
    }

    pub fn dataset_dir(&self, name: &str) -> Result<PathBuf, CliError> {
        self.ensure_dir(self.out.join("datasets").join(name))
    }

    pub fn models_dir(&self) -> Result<PathBuf, CliError> {
        self.ensure_dir(self.out.join("models"))
    }

    pub fn reports_dir(&self) -> Result<PathBuf, CliError> {
        self.ensure_dir(self.out.join("reports"))
    }

    pub fn logs_dir(&self) -> Result<PathBuf, CliError> {
        self.ensure_dir(self.out.join("logs"))
    }

    fn ensure_dir(&self, dir: PathBuf) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    pub fn write(&self, path: &Path, content: &str) -> Result<(), CliError> {
        fs::write(path, content)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
    }
}

/// Entry point for the binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Parses `args` (including the program name) and executes the command.
/// Returns the process exit code instead of exiting, so tests can drive it.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // clap already formats help/version (exit 0) and usage errors
            // (exit 2) and knows which stream they belong on.
            let code = if err.exit_code() == 0 { 0 } else { 2 };
            let _ = err.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(err) => {
            eprintln!("error: {}", err.message());
            err.code()
        }
    }
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        // The global pool can only be installed once per process (tests
        // drive run_from repeatedly); later calls keep the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = Ctx {
        file: FileConfig::load(cli.config.as_deref())?,
        seed: cli.seed,
        out: cli.out,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Synth(args) => synth::cmd_synth(&ctx, &args),
        Command::Preprocess(args) => data::cmd_preprocess(&ctx, &args),
        Command::Train(args) => model::cmd_train(&ctx, &args),
        Command::Eval(args) => model::cmd_eval(&ctx, &args),
        Command::Features(args) => data::cmd_features(&ctx, &args),
        Command::Pipeline(args) => experiment::cmd_pipeline(&ctx, &args),
        Command::Grid(args) => experiment::cmd_grid(&ctx, &args),
    }
}

#[cfg(test)]
mod tests;

//! The `mtmm` command-line harness.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation failure,
//! 3 numeric failure.

pub mod compare;
pub mod config;
pub mod error;
pub mod export;
mod run;

use clap::{Args, Parser, Subcommand};
use config::{parse_dims, parse_thresholds, RunConfig};
use error::{CliError, Result};
use mtmm_core::data::{Dims, Split};
use mtmm_core::metrics::Thresholds;
use mtmm_core::model::{Modalities, TaskMode};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub use run::{cmd_eval, cmd_synth, cmd_train};

#[derive(Debug, Parser)]
#[command(
    name = "mtmm",
    version,
    about = "Multi-task multi-modal sentiment and emotion classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic JSONL dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, history and resolved config.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the STL/MTL x modality grid and tabulate dev scores.
    Compare(CompareArgs),
    /// Write the pairwise attention maps of one video as CSV (and SVG).
    ExportAttention(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub videos: u64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub u_min: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub u_max: u64,
    /// Feature sizes as `text,acoustic,visual`.
    #[arg(long, default_value = "16,12,10", value_parser = parse_dims)]
    pub dims: Dims,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Dependence of emotions on sentiment, in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub coupling: f64,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Hyperparameter overrides shared by `train` and `compare`.
#[derive(Debug, Default, Args)]
pub struct ModelFlags {
    /// JSON run config; flags given here take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// GRU hidden size per direction.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub dense_units: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Sentiment loss weight under MTL.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub clip_grad_norm: Option<f64>,
    /// Emotion thresholds as `f1,wacc`.
    #[arg(long, value_parser = parse_thresholds)]
    pub thresholds: Option<Thresholds>,
}

impl ModelFlags {
    pub fn apply(&self, c: &mut RunConfig) {
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(seed => seed, epochs => epochs, batch_size => batch_size, lr => learning_rate,
             d => d, dense_units => dense_units, dropout => dropout_rate,
             lambda => loss_weight_lambda, thresholds => thresholds);
        if self.clip_grad_norm.is_some() {
            c.clip_grad_norm = self.clip_grad_norm;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: ModelFlags,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TaskMode>,
    /// Subset of `t,a,v`, e.g. `t,v` or `tav`.
    #[arg(long, value_parser = parse_modalities)]
    pub modalities: Option<Modalities>,
    #[arg(long, visible_alias = "data")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Output directory [default: $MTMM_OUT_DIR, else mtmm-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "0.4,0.2", value_parser = parse_thresholds)]
    pub thresholds: Thresholds,
    /// Also write report.json and report.txt here [default: $MTMM_OUT_DIR].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub flags: ModelFlags,
    /// Training data; the dev set is split off it unless `--dev` is given.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub dev_fraction: f64,
    /// Comma-separated seeds; each runs the whole grid. Defaults to the
    /// config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output directory [default: $MTMM_OUT_DIR, else mtmm-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub video_id: String,
    /// Output directory [default: $MTMM_OUT_DIR, else mtmm-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also render each pair as an SVG heatmap.
    #[arg(long)]
    pub svg: bool,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (train, dev, test)")),
    }
}

fn parse_mode(s: &str) -> std::result::Result<TaskMode, String> {
    s.parse()
        .map_err(|e: mtmm_core::model::ModelError| e.to_string())
}

fn parse_modalities(s: &str) -> std::result::Result<Modalities, String> {
    s.parse()
        .map_err(|e: mtmm_core::model::ModelError| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => compare::cmd_compare(&a),
        Command::ExportAttention(a) => export::cmd_export_attention(&a),
    }
}

/// Parses `args` (program name first), runs the command and maps the
/// outcome to an exit code, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub(crate) fn to_json_pretty<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

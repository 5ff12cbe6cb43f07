//! `t1q` command line: phantom generation, map fitting, multi-TI synthesis,
//! cross-validated training, channel saliency, evaluation and statistics.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    t1q_core::relaxometry::RelaxError,
    t1q_core::volume::VolumeError,
    t1q_core::volume::nifti::NiftiError,
    t1q_core::autodiff::AdError,
    t1q_core::segnet::SegError,
    t1q_core::saliency::SaliencyError,
    t1q_core::stats::StatsError
);

/// Writes a file, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

#[derive(Debug, Parser)]
#[command(
    name = "t1q",
    version,
    about = "T1 mapping, multi-TI synthesis and thalamic-nuclei input selection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 guarantees bit-exact reruns.
    #[arg(long, env = "T1Q_THREADS")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory written by `fit-maps`.
    #[arg(long)]
    pub maps: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic thalamus phantoms and a manifest.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        subjects: usize,
        /// Cube edge length in voxels.
        #[arg(long, default_value_t = 32)]
        dims: usize,
        /// Gaussian noise sigma added to both acquisitions.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Label erosion radius in voxels.
        #[arg(long, default_value_t = 1)]
        erosion: usize,
    },
    /// Fit PD and T1 maps from each subject's MPRAGE/FGATIR pair.
    FitMaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Treat inputs as magnitude images.
        #[arg(long)]
        magnitude: bool,
    },
    /// Synthesize T1-weighted images over a range of inversion times.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = 400.0)]
        ti_start: f64,
        #[arg(long, default_value_t = 1400.0)]
        ti_end: f64,
        #[arg(long, default_value_t = 20.0)]
        step: f64,
    },
    /// Cross-validated U-Net training.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Cubic training crop edge.
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        /// Train only this fold (0-based); default all.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        no_augment: bool,
    },
    /// Overall Importance Score of every input channel.
    Ois {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Directory written by `train`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        mc_runs: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        /// Also write the k best channels.
        #[arg(long)]
        topk: Option<usize>,
        /// Keep every per-(subject, run, class, channel) contribution.
        #[arg(long)]
        keep_raw: bool,
    },
    /// Predict each subject with its test-fold model and score sparse-label TPR.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        models: PathBuf,
        /// Configuration name recorded in the results (default: the input preset).
        #[arg(long)]
        name: Option<String>,
    },
    /// Mean ± SD table and Wilcoxon/Holm significance against a reference.
    Stats {
        #[command(flatten)]
        common: Common,
        /// `results.json` files written by `evaluate`.
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        reference: String,
        #[arg(long)]
        alpha: Option<f64>,
        /// `labeled` (per-subject labeled counts) or `atlas` (atlas volume fractions).
        #[arg(long)]
        vwa_weights: Option<String>,
    },
    /// Collect run outputs into a Markdown report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Output directories of earlier commands.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    /// Input channel preset (stage1, config1..config9 or their short names).
    #[arg(long)]
    pub config_preset: Option<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Phantom { common, .. }
            | Command::FitMaps { common, .. }
            | Command::Synthesize { common, .. }
            | Command::Train { common, .. }
            | Command::Ois { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Stats { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Effective configuration: defaults, then `--config`, then flags.
pub fn effective_config(cmd: &Command) -> Result<RunConfig, CliError> {
    let common = cmd.common();
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    match cmd {
        Command::Train {
            model,
            epochs,
            lr,
            crop,
            folds,
            no_augment,
            ..
        } => {
            apply_model_flags(&mut cfg, model);
            if let Some(e) = epochs {
                cfg.train.max_epochs = *e;
            }
            if let Some(l) = lr {
                cfg.train.lr = *l;
            }
            if let Some(c) = crop {
                cfg.train.crop_size = [*c; 3];
            }
            if let Some(k) = folds {
                cfg.folds = *k;
            }
            if *no_augment {
                cfg.train.augment = false;
            }
        }
        Command::Ois {
            mc_runs,
            dropout,
            keep_raw,
            ..
        } => {
            if let Some(m) = mc_runs {
                cfg.ois.mc_runs = *m;
            }
            if let Some(p) = dropout {
                cfg.ois.dropout_p = *p;
            }
            if *keep_raw {
                cfg.ois.keep_raw = true;
            }
        }
        Command::Stats { alpha, vwa_weights, .. } => {
            if let Some(a) = alpha {
                cfg.alpha = *a;
            }
            if let Some(w) = vwa_weights {
                cfg.vwa_weights = match w.as_str() {
                    "labeled" => t1q_core::stats::VwaWeights::LabeledCounts,
                    "atlas" => t1q_core::stats::VwaWeights::AtlasFractions,
                    other => {
                        return Err(CliError::Usage(format!(
                            "--vwa-weights must be labeled or atlas, got {other}"
                        )))
                    }
                };
            }
        }
        _ => {}
    }
    cfg.output_dir = common.out.display().to_string();
    if cfg.threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    Ok(cfg.finish())
}

fn apply_model_flags(cfg: &mut RunConfig, m: &ModelFlags) {
    if let Some(p) = &m.config_preset {
        cfg.input_preset = p.clone();
    }
    if let Some(d) = m.depth {
        cfg.unet.depth = d;
    }
    if let Some(b) = m.base_channels {
        cfg.unet.base_channels = b;
    }
    if let Some(p) = m.dropout {
        cfg.unet.dropout_p = p;
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli.command)?;
    let out = cli.command.common().out.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::Data(format!("creating {}: {e}", out.display())))?;
    cfg.save(&out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Data(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(&cli.command, &cfg, &out))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

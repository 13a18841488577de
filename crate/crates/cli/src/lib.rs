//! The `hepadet` command line.
//!
//! Every subcommand resolves one [`RunConfig`] (config file, then flags) and
//! writes a snapshot of it next to its outputs.

mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use hepadet_core::config::RunConfig;
use hepadet_core::dataset::read_json;
use hepadet_core::error::CoreError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

pub const CONFIG_SNAPSHOT: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "hepadet", version, about = "Liver lesion detection on multi-phase CT phantoms")]
pub struct Cli {
    /// Run config JSON; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed; required when no config file is given.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Drop timings from logs so outputs are byte-identical across runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset into --out.
    Phantom {
        /// Phantom spec JSON; defaults to the config's phantom section.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Subject count; defaults to the config's train + test size.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Write windowed slabs of every lesion center slice as PGM montages.
    Preprocess {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Only this subject id.
        #[arg(long)]
        subject: Option<String>,
    },
    /// Print the backbone stage shapes and check them against a contract.
    Trace {
        /// Contract JSON; defaults to the paper table scaled to the config.
        #[arg(long)]
        contract: Option<PathBuf>,
        #[arg(long)]
        depth: Option<u32>,
    },
    /// Train on the train split and write a checkpoint.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Lesion-level accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Detections, overlays and a false-positive gallery.
    Infer {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Drop detections scoring below this.
        #[arg(long)]
        min_score: Option<f64>,
        /// Overlay upscaling factor.
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
    /// Train and evaluate the six framework variants.
    Ablation {
        /// Dataset to split; phantoms are generated in memory when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Epochs per variant.
        #[arg(long)]
        epochs: Option<usize>,
        /// Phantoms in the relation-energy trend check.
        #[arg(long, default_value_t = 100)]
        trend_seeds: u64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Validation(m) => write!(f, "validation failed: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::Shape(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Config file (if any) with the global flags applied; not yet validated.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => read_json::<RunConfig>(p).map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?,
        None => {
            let seed = cli
                .seed
                .ok_or_else(|| CliError::Usage("--seed is required without --config".into()))?;
            RunConfig::desk(seed)
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = Some(o.clone());
    }
    Ok(cfg)
}

pub(crate) fn set_dataset(cfg: &mut RunConfig, flag: &Option<PathBuf>) -> CliResult<PathBuf> {
    if let Some(d) = flag {
        cfg.paths.dataset = Some(d.clone());
    }
    cfg.paths
        .dataset
        .clone()
        .ok_or_else(|| CliError::Usage("a dataset is required (--dataset or paths.dataset)".into()))
}

pub(crate) fn create_out(cfg: &RunConfig) -> CliResult<Option<PathBuf>> {
    let Some(out) = &cfg.paths.out else { return Ok(None) };
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    Ok(Some(out.clone()))
}

pub(crate) fn require_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    create_out(cfg)?.ok_or_else(|| CliError::Usage("--out is required for this command".into()))
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub(crate) fn write_snapshot(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    write_text(&dir.join(CONFIG_SNAPSHOT), &text)
}

/// Runs a parsed command line, printing to stdout and returning the exit code.
pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Phantom { spec, count } => commands::phantom(cfg, spec.as_deref(), *count),
        Command::Preprocess { dataset, subject } => commands::preprocess(cfg, dataset, subject.as_deref()),
        Command::Trace { contract, depth } => commands::trace(cfg, contract.as_deref(), *depth),
        Command::Train { dataset, epochs } => commands::train(cfg, dataset, *epochs, cli.deterministic),
        Command::Eval { dataset, checkpoint, split } => commands::eval(cfg, dataset, checkpoint, *split),
        Command::Infer {
            dataset,
            checkpoint,
            split,
            min_score,
            scale,
        } => commands::infer(cfg, dataset, checkpoint, *split, *min_score, *scale),
        Command::Ablation {
            dataset,
            epochs,
            trend_seeds,
        } => commands::ablation(cfg, dataset, *epochs, *trend_seeds, cli.deterministic),
    }
}

/// Parses `args` and runs; usage errors exit 1 rather than clap's default.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

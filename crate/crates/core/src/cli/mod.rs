//! The `endonet` command line. Every subcommand reads and writes the
//! documented file formats, and every invocation records a run log under
//! `<data root>/runs/<unix time>-<config hash>/`.
//!
//! Exit codes: 0 success, 1 domain error (one JSON object on stderr),
//! 2 usage error.

mod evaluate;
mod extract;
mod finetune;
mod predict;
mod pretrain;
mod split;
mod synth;
mod tile;
mod train_cnn;
mod visualize;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::features::read_feature_store;
use crate::pipeline::{config_hash, group_features, RunLog, SlideFeatures};
use crate::wsi::{read_manifest, SlideManifestEntry};
use crate::Error;

pub use tile::{read_tiles, write_tiles, TileRecord};

pub const DATA_DIR_ENV: &str = "ENDONET_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "endonet", version, about = "Whole-slide grading with a masked-pretrained region transformer")]
struct Cli {
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded execution; identical invocations produce identical artifacts.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root for relative paths and run directories (default: $ENDONET_DATA_DIR, else the current directory).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic cohort: slide containers, manifest and annotations.
    Synth(synth::Args),
    /// Patient-grouped train/val/test split of a manifest.
    Split(split::Args),
    /// Tissue masks and candidate regions for every slide.
    Tile(tile::Args),
    /// Train the patch classifier on annotation boxes.
    TrainCnn(train_cnn::Args),
    /// Encode every candidate region into a feature store.
    ExtractFeatures(extract::Args),
    /// Masked-feature pre-training of the region transformer.
    Pretrain(pretrain::Args),
    /// Slide-level fine-tuning from a pre-training checkpoint.
    Finetune(finetune::Args),
    /// Score slides with 25 regions each.
    Predict(predict::Args),
    /// F1/AUC with bootstrap intervals, subtype table and ROC points.
    Evaluate(evaluate::Args),
    /// Attention overlay for one slide.
    Visualize(visualize::Args),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Split(_) => "split",
            Command::Tile(_) => "tile",
            Command::TrainCnn(_) => "train-cnn",
            Command::ExtractFeatures(_) => "extract-features",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Visualize(_) => "visualize",
        }
    }

    fn config(&self) -> serde_json::Value {
        let v = match self {
            Command::Synth(a) => serde_json::to_value(a),
            Command::Split(a) => serde_json::to_value(a),
            Command::Tile(a) => serde_json::to_value(a),
            Command::TrainCnn(a) => serde_json::to_value(a),
            Command::ExtractFeatures(a) => serde_json::to_value(a),
            Command::Pretrain(a) => serde_json::to_value(a),
            Command::Finetune(a) => serde_json::to_value(a),
            Command::Predict(a) => serde_json::to_value(a),
            Command::Evaluate(a) => serde_json::to_value(a),
            Command::Visualize(a) => serde_json::to_value(a),
        };
        v.expect("arguments serialize")
    }
}

/// Shared state of one invocation.
pub(crate) struct Ctx {
    root: PathBuf,
    run_dir: PathBuf,
    pub seed: u64,
    /// True when `--seed` was given explicitly.
    pub seed_given: bool,
    artifacts: Vec<PathBuf>,
}

impl Ctx {
    /// `p` if absolute, else relative to the data root.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Output path: `p` resolved like [`Ctx::path`], or `default` inside the
    /// run directory. Parent directories are created.
    pub fn output(&mut self, p: Option<&Path>, default: &str) -> Result<PathBuf, Error> {
        let path = match p {
            Some(p) => self.path(p),
            None => self.run_dir.join(default),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.artifacts.push(path.clone());
        Ok(path)
    }
}

/// Outcome of a subcommand: the log to record (epochs, warnings) if any.
pub(crate) type Outcome = Option<RunLog>;

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Manifest entries and the slide directory they resolve against.
pub(crate) fn load_manifest(path: &Path) -> Result<(Vec<SlideManifestEntry>, PathBuf), Error> {
    let entries = read_manifest(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((entries, dir))
}

pub(crate) fn load_slide_features(manifest: &Path, features: &Path) -> Result<Vec<SlideFeatures>, Error> {
    let (entries, _) = load_manifest(manifest)?;
    let bundles = read_feature_store(features)?;
    Ok(group_features(&entries, bundles))
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn create_run_dir(root: &Path, hash: &str) -> Result<PathBuf, Error> {
    let runs = root.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let base = format!("{}-{}", unix_time(), &hash[..12]);
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = runs.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn dispatch(command: &Command, ctx: &mut Ctx) -> Result<Outcome, Error> {
    match command {
        Command::Synth(a) => synth::run(a, ctx),
        Command::Split(a) => split::run(a, ctx),
        Command::Tile(a) => tile::run(a, ctx),
        Command::TrainCnn(a) => train_cnn::run(a, ctx),
        Command::ExtractFeatures(a) => extract::run(a, ctx),
        Command::Pretrain(a) => pretrain::run(a, ctx),
        Command::Finetune(a) => finetune::run(a, ctx),
        Command::Predict(a) => predict::run(a, ctx),
        Command::Evaluate(a) => evaluate::run(a, ctx),
        Command::Visualize(a) => visualize::run(a, ctx),
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    let root = match cli.data_dir.clone().or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)) {
        Some(r) => r,
        None => std::env::current_dir().map_err(|e| Error::io(".", e))?,
    };
    let seed = cli.seed.unwrap_or(0);
    let config = serde_json::json!({
        "command": cli.command.name(),
        "args": cli.command.config(),
        "seed": seed,
        "deterministic": cli.deterministic,
    });
    let hash = config_hash(&config);
    let run_dir = create_run_dir(&root, &hash)?;
    let jobs = if cli.deterministic { 1 } else { cli.jobs.unwrap_or(0) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let mut ctx = Ctx { root, run_dir: run_dir.clone(), seed, seed_given: cli.seed.is_some(), artifacts: Vec::new() };
    let started = Instant::now();
    let result = pool.install(|| dispatch(&cli.command, &mut ctx));
    let mut log = RunLog::new(cli.command.name(), seed, &config);
    let stage = match &result {
        Ok(Some(stage)) => Some(stage.clone()),
        _ => None,
    };
    if let Some(stage) = stage {
        log.epochs = stage.epochs;
        log.selected_epoch = stage.selected_epoch;
        log.warnings = stage.warnings;
    }
    if let Err(e) = &result {
        log.warnings.push(format!("failed: {e}"));
    }
    log.wall_clock_s = started.elapsed().as_secs_f64();
    write_json(&run_dir.join("runlog.json"), &log)?;
    result?;
    let summary = serde_json::json!({
        "command": cli.command.name(),
        "run_dir": run_dir,
        "artifacts": ctx.artifacts,
    });
    println!("{summary}");
    Ok(())
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let mut obj = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            if let Some(line) = e.line() {
                obj["line"] = line.into();
            }
            eprintln!("{obj}");
            1
        }
    }
}

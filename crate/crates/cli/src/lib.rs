//! Library behind the `camo` binary: argument parsing, run directories and
//! the subcommands.

pub mod commands;
pub mod config;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context};
use clap::Parser;

pub use config::{parse_config, parse_overrides, Command, Precision, RunConfig, ValidationError};

/// Name of the resolved configuration written into every run directory.
pub const EFFECTIVE_CONFIG: &str = "config.effective.toml";
pub const RUN_LOG: &str = "run.log";

#[derive(Debug, Parser)]
#[command(name = "camo", version, about = "Camouflaged adversarial image synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, clap::Subcommand)]
pub enum Sub {
    /// Attack one image.
    Attack(RunArgs),
    /// Sweep λ, region size and mode over a corpus.
    Grid(RunArgs),
    /// Measure how often an image fools the classifier under random transforms.
    EvalTransforms(RunArgs),
    /// Train a classifier and a feature extractor on the procedural classes.
    Train(RunArgs),
    /// Write a procedural corpus, style images and backgrounds.
    MakeCorpus(RunArgs),
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Settings overriding the file, as `--section.key=value` or `--section.key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

impl Sub {
    pub fn split(&self) -> (Command, &RunArgs) {
        match self {
            Sub::Attack(a) => (Command::Attack, a),
            Sub::Grid(a) => (Command::Grid, a),
            Sub::EvalTransforms(a) => (Command::EvalTransforms, a),
            Sub::Train(a) => (Command::Train, a),
            Sub::MakeCorpus(a) => (Command::MakeCorpus, a),
        }
    }
}

/// How a command ended when it did not fail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub run_dir: PathBuf,
    /// False when no adversarial image was found (or, for `eval-transforms`,
    /// the image fell below the success threshold).
    pub success: bool,
}

/// A run's output directory and its log.
pub struct RunDir {
    pub path: PathBuf,
    log: Mutex<File>,
}

impl RunDir {
    /// Creates the run directory; an existing one is an error unless `force`.
    pub fn create(cfg: &RunConfig, command: Command) -> anyhow::Result<Self> {
        let name = cfg.run_name.clone().unwrap_or_else(|| {
            let ts = chrono::Local::now().format("%Y%m%d-%H%M%S");
            format!("{}-{ts}-seed{}", command.name(), cfg.seed)
        });
        let path = cfg.output_dir.join(name);
        if path.exists() && !cfg.force {
            bail!(
                "run directory {} already exists (set force = true to reuse it)",
                path.display()
            );
        }
        std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path.join(RUN_LOG))
            .context("opening run log")?;
        Ok(Self {
            path,
            log: Mutex::new(log),
        })
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }

    /// Appends a timestamped line to the run log and mirrors it to `log`.
    pub fn log(&self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        log::info!("{msg}");
        let ts = chrono::Local::now().format("%Y-%m-%dT%H:%M:%S%.3f");
        if let Ok(mut f) = self.log.lock() {
            let _ = writeln!(f, "{ts} {msg}");
        }
    }
}

/// Removes a `--config`/`-c` that clap left among the trailing overrides.
fn take_config_flag(args: &[String]) -> anyhow::Result<(Option<PathBuf>, Vec<String>)> {
    let mut file = None;
    let mut rest = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let value = if a == "--config" || a == "-c" {
            Some(it.next().cloned().context("--config needs a path")?)
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        };
        match value {
            Some(v) if file.is_some() => bail!("--config given twice (also {v})"),
            Some(v) => file = Some(PathBuf::from(v)),
            None => rest.push(a.clone()),
        }
    }
    Ok((file, rest))
}

/// Parses, validates and runs one command.
pub fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let (command, args) = cli.command.split();
    let (late_config, rest) = take_config_flag(&args.overrides)?;
    let file = match (&args.config, late_config) {
        (Some(_), Some(_)) => bail!("--config given twice"),
        (Some(f), None) => Some(f.clone()),
        (None, f) => f,
    };
    let overrides = parse_overrides(&rest)?;
    let mut cfg = parse_config(file.as_deref(), &overrides)?;
    cfg.validate(command)?;
    let dir = RunDir::create(&cfg, command)?;
    cfg.run_name = dir.path.file_name().map(|n| n.to_string_lossy().into_owned());
    std::fs::write(dir.join(EFFECTIVE_CONFIG), cfg.to_toml()).context("writing effective config")?;
    dir.log(format!(
        "{} started, precision {:?}, seed {}",
        command.name(),
        cfg.precision,
        cfg.seed
    ));
    let res = match cfg.precision {
        Precision::F32 => commands::execute::<f32>(command, &cfg, &dir),
        Precision::F64 => commands::execute::<f64>(command, &cfg, &dir),
    };
    match &res {
        Ok(success) => dir.log(format!("finished, success = {success}")),
        Err(e) => dir.log(format!("failed: {e:#}")),
    }
    Ok(Outcome {
        run_dir: dir.path.clone(),
        success: res?,
    })
}

//! `bolddecode` command-line driver: one binary, one JSON config, every
//! pipeline stage as a subcommand.

pub mod commands;
pub mod config;
pub mod error;
pub mod models;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use commands::*;
pub use config::{resolve, split_overrides, CliConfig, RESOLVED_FILE};
pub use error::CliError;

/// Environment variable naming the output root.
pub const ROOT_ENV: &str = "BOLDDECODE_OUT";

#[derive(Debug, Parser)]
#[command(name = "bolddecode", version, about = "Time-resolved fMRI-to-image decoding on a synthetic cortex")]
#[command(after_help = "Config keys are overridable with dotted flags, e.g. --train.steps=2000.")]
pub struct Cli {
    /// Output root; falls back to $BOLDDECODE_OUT, then ./runs.
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    /// JSON config file (a resolved config from an earlier run works too).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// More logging (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
pub enum Command {
    /// Simulate the synthetic dataset.
    GenData(GenDataArgs),
    /// Detrend and z-score runs; write splits and epoch caches.
    Preprocess(PreprocessArgs),
    /// Pretrain the unconditional image generator.
    PretrainGen(PretrainArgs),
    /// Train a brain-conditioned decoder.
    Train(TrainArgs),
    /// Reconstruct images for test trials.
    Infer(InferArgs),
    /// Score a decoder on the test split.
    Eval(EvalArgs),
    /// Shifted-window sweep with general and specialized models.
    SweepTime(SweepTimeArgs),
    /// Window-duration sweep, one model per duration.
    SweepDuration(SweepDurationArgs),
    /// Brain-module design variants, trained and scored.
    AblateBrainmod(AblateArgs),
    /// Run the invariant suites.
    Selftest(SelftestArgs),
    /// Re-run the command recorded in a resolved-config file.
    Replay(ReplayArgs),
}

pub fn output_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .try_init();
}

fn init_workers(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        // a second build in the same process (tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses argv (without the program name) and runs it. Returns the exit
/// code: 0 success, 2 bad usage or config (with the key path), 1 otherwise.
pub fn dispatch(args: Vec<String>) -> i32 {
    let (rest, overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(std::iter::once("bolddecode".to_string()).chain(rest)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match run(cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    init_workers(cli.workers)?;
    let root = output_root(cli.root.as_deref());
    if let Command::Replay(args) = &cli.command {
        let text =
            std::fs::read_to_string(&args.file).map_err(|source| CliError::Io { path: args.file.clone(), source })?;
        let resolved: Resolved = serde_json::from_str(&text)
            .map_err(|e| CliError::Config { key: "<file>".into(), msg: format!("{}: {e}", args.file.display()) })?;
        if matches!(resolved.invocation, Command::Replay(_)) {
            return Err(CliError::Usage("a resolved config never records a replay".into()));
        }
        let cfg = config::resolve(Some(&args.file), overrides)?;
        return execute(&root, cfg, resolved.invocation);
    }
    let cfg = config::resolve(cli.config.as_deref(), overrides)?;
    execute(&root, cfg, cli.command)
}

/// What gets written next to every output: the exact invocation and the
/// fully resolved config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolved {
    pub schema_version: u32,
    pub invocation: Command,
    pub config: CliConfig,
}

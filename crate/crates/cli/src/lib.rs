//! Command-line pipeline: `collect → fit → eval-predict → navigate → report`.
//!
//! Every command is a pure function of the run config, the flags and the
//! seed, and writes under one output directory:
//!
//! ```text
//! <out>/datasets/{train,validation}/      trajectory CSVs + manifest.json
//! <out>/models/<lift>.json                fitted models
//! <out>/eval/<dataset>/<lift>.csv         per-step prediction errors
//! <out>/eval/{summary.csv,summary.json,table.txt}
//! <out>/nav/<map>/<lift>/                 episode traces, episodes.csv, summary.json
//! <out>/report/{prediction.csv,navigation.csv,report.txt}
//! ```
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 IO error or
//! missing artifacts, 4 internal failure.

pub mod commands;
pub mod config;

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use knav_core::sysid::LiftSpec;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Output directory used when neither the flag nor the config names one.
pub const DEFAULT_OUT: &str = "knav-run";
pub const LOCK_FILE: &str = ".knav.lock";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<knav_core::Error> for CliError {
    fn from(e: knav_core::Error) -> Self {
        use knav_core::Error as E;
        let code = match &e {
            E::Config(_) | E::Argument(_) => EXIT_CONFIG,
            E::Io { .. } | E::Format { .. } => EXIT_IO,
            E::Domain(_) | E::Numeric { .. } | E::Plan(_) | E::Qp(_) | E::MpcFailure(_) => EXIT_INTERNAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub(crate) fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "knav", version, about = "Learned linear models and MPC for safe robot navigation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, env = "KNAV_CONFIG")]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, env = "KNAV_SEED")]
    pub seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, env = "KNAV_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, env = "KNAV_THREADS", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the plant and write the training and validation datasets.
    Collect,
    /// Fit one model per lift on the training dataset.
    Fit(FitArgs),
    /// Evaluate multi-step prediction error on sampled windows.
    EvalPredict(EvalArgs),
    /// Run closed-loop navigation suites.
    Navigate(NavigateArgs),
    /// Merge evaluation and navigation results into tables.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Lift to fit (repeatable): identity, poly3, td:N, componentwise, integrator.
    #[arg(long = "lift", value_parser = parse_lift)]
    pub lifts: Vec<LiftSpec>,
    /// Dataset directory; `<out>/datasets/train` by default.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Integrator,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Model file (repeatable); the configured lifts under `<out>/models` by default.
    #[arg(long = "model")]
    pub models: Vec<PathBuf>,
    /// Include a baseline that needs no model file.
    #[arg(long)]
    pub baseline: Option<Baseline>,
    /// Dataset directory (repeatable); train and validation by default.
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// Number of sampled windows per dataset, overriding the config
    #[arg(long)]
    pub sequences: Option<usize>,
    /// Prediction horizon in steps, at most the dataset window length
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct NavigateArgs {
    /// Model file; `<out>/models/<nav.model>.json` by default.
    #[arg(long, conflicts_with = "baseline")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub baseline: Option<Baseline>,
    /// Built-in map name or path to a map JSON file (repeatable).
    #[arg(long = "map")]
    pub maps: Vec<String>,
    /// Episodes per map; 20 for corridors and 10 for mazes by default
    #[arg(long)]
    pub runs: Option<usize>,
    /// Also write per-solve traces (these contain wall times and are not
    /// reproducible byte for byte).
    #[arg(long)]
    pub solver_trace: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directory; the output directory by default.
    pub dir: Option<PathBuf>,
}

fn parse_lift(s: &str) -> Result<LiftSpec, String> {
    let spec: LiftSpec = s.parse().map_err(|e: knav_core::Error| e.to_string())?;
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::io(format!(
                    "{} is locked by another run (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                ))
            } else {
                io_error(&path, e)
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Resolved settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(global: &GlobalArgs) -> Result<Self, CliError> {
        let mut config = match &global.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = global.seed {
            config.seed = seed;
        }
        let out = global
            .out
            .clone()
            .or_else(|| config.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Self { config, out })
    }

    pub fn dataset_dir(&self, name: &str) -> PathBuf {
        self.out.join("datasets").join(name)
    }

    pub fn model_path(&self, lift: &LiftSpec) -> PathBuf {
        self.out.join("models").join(format!("{}.json", slug(lift)))
    }
}

/// File-name form of a lift: `td:30` becomes `td-30`.
pub fn slug(lift: &LiftSpec) -> String {
    lift.to_string().replace(':', "-")
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to stdout. Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Parses and runs without printing; argument errors map to [`EXIT_CONFIG`].
pub fn execute<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::config(e.to_string()))?;
    run(&cli)
}

/// Runs a parsed command and returns what it prints.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let ctx = Context::new(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build()
        .map_err(|e| CliError::internal(format!("cannot start worker threads: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Collect => {
            let _lock = OutputLock::acquire(&ctx.out)?;
            commands::collect(&ctx)
        }
        Command::Fit(args) => {
            let _lock = OutputLock::acquire(&ctx.out)?;
            commands::fit(&ctx, args)
        }
        Command::EvalPredict(args) => {
            let _lock = OutputLock::acquire(&ctx.out)?;
            commands::eval_predict(&ctx, args)
        }
        Command::Navigate(args) => {
            let _lock = OutputLock::acquire(&ctx.out)?;
            commands::navigate(&ctx, args)
        }
        Command::Report(args) => {
            let dir = args.dir.clone().unwrap_or_else(|| ctx.out.clone());
            if !dir.is_dir() {
                return Err(CliError::io(format!("run directory {} does not exist", dir.display())));
            }
            let _lock = OutputLock::acquire(&dir)?;
            commands::report(&dir)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let cases = [
            (knav_core::Error::Config("x".into()), EXIT_CONFIG),
            (knav_core::Error::Argument("x".into()), EXIT_CONFIG),
            (
                knav_core::Error::Format {
                    path: "p".into(),
                    message: "m".into(),
                },
                EXIT_IO,
            ),
            (knav_core::Error::MpcFailure("x".into()), EXIT_INTERNAL),
        ];
        for (err, code) in cases {
            assert_eq!(CliError::from(err).code, code);
        }
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert_eq!(OutputLock::acquire(dir.path()).unwrap_err().code, EXIT_IO);
        drop(lock);
        assert!(!dir.path().join(LOCK_FILE).exists());
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["knav", "--seed", "9", "--out", "/tmp/x", "fit", "--lift", "td:30"]).unwrap();
        let ctx = Context::new(&cli.global).unwrap();
        assert_eq!(ctx.config.seed, 9);
        assert_eq!(ctx.out, PathBuf::from("/tmp/x"));
        match cli.command {
            Command::Fit(args) => assert_eq!(args.lifts, vec![LiftSpec::TimeDelay(30)]),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(ctx.model_path(&LiftSpec::TimeDelay(30)), PathBuf::from("/tmp/x/models/td-30.json"));
        assert!(Cli::try_parse_from(["knav", "fit", "--lift", "td:0"]).is_err());
        assert!(Cli::try_parse_from(["knav", "fit", "--lift", "cubic"]).is_err());
    }
}

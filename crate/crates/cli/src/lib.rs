//! Argument handling and subcommands behind the `splitdl` binary.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use splitdl::io::{load_csv, save_csv};
use splitdl::simulate::{replication_seed, simulate_dataset, SignalLayout};
use splitdl::{
    multi_split_fit, run_study, single_split_fit, AnalysisReport, Dataset, FamilyKind, GlmFamily,
    MetricsTable, MultiSplitConfig, SimConfig,
};

/// Exit status for bad arguments, configs or input files.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for numerical failures during fitting.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "splitdl", version, about = "Sample-splitting debiased lasso for GLMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Single split: lasso selection on one part, debiased lasso on the other.
    Fit(FitArgs),
    /// Average debiased estimates of fixed targets over many random splits.
    Multifit(FitArgs),
    /// Run a simulation study from a preset or a TOML config.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// CSV file with a header row.
    pub data: PathBuf,
    #[arg(long, default_value = "binomial")]
    pub family: FamilyKind,
    #[arg(long)]
    pub response: String,
    /// Covariates to estimate; `fit` forces them into the selected model.
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<String>,
    /// Covariates to center and scale before fitting.
    #[arg(long, value_delimiter = ',')]
    pub standardize: Vec<String>,
    /// Fraction of the sample used for selection.
    #[arg(long, default_value_t = 0.5)]
    pub q: f64,
    #[arg(long = "B", default_value_t = 1000)]
    pub n_splits: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Drawn from entropy and printed when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// TOML file with the study settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of replications.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Override the number of splits.
    #[arg(long = "B")]
    pub n_splits: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Write the metrics as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the first replication's dataset to this CSV (response `y`) and
    /// print the true target coefficients instead of running the study.
    #[arg(long)]
    pub emit_data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
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

impl From<splitdl::Error> for CliError {
    fn from(e: splitdl::Error) -> Self {
        use splitdl::Error::*;
        let code = match e {
            InvalidArgument(_) | DimensionMismatch { .. } | Parse { .. } | Io(_) => EXIT_USAGE,
            SingularHessian { .. }
            | NonConvergence { .. }
            | SplitEstimation { .. }
            | TooManyFailedSplits { .. } => EXIT_NUMERICAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// What `simulate` produced.
#[derive(Debug)]
pub enum SimOutput {
    Metrics(Box<MetricsTable>),
    /// TSV of the true target coefficients of an emitted dataset.
    Truth(String),
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed: {s}");
        s
    })
}

fn resolve_threads(threads: Option<usize>) -> Result<Option<usize>, CliError> {
    match threads {
        Some(0) => Err(CliError::usage("--threads must be positive")),
        Some(k) => Ok(Some(k)),
        None => Ok(std::thread::available_parallelism().ok().map(|k| k.get())),
    }
}

fn check_fraction(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!("--{name} must lie in (0, 1), got {v}")))
    }
}

/// Column indices of the named covariates; the intercept cannot be named.
pub fn resolve_targets(data: &Dataset, names: &[String]) -> Result<Vec<usize>, CliError> {
    names
        .iter()
        .map(|name| {
            data.column_names()
                .iter()
                .skip(1)
                .position(|c| c == name)
                .map(|i| i + 1)
                .ok_or_else(|| CliError::usage(format!("unknown target '{name}'")))
        })
        .collect()
}

fn prepare(args: &FitArgs) -> Result<(Dataset, Vec<usize>, MultiSplitConfig), CliError> {
    check_fraction("q", args.q)?;
    check_fraction("level", args.level)?;
    if args.n_splits == 0 {
        return Err(CliError::usage("--B must be positive"));
    }
    let loaded = load_csv(&args.data, &args.response, &args.standardize)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let targets = resolve_targets(&loaded.data, &args.targets)?;
    let config = MultiSplitConfig {
        q: args.q,
        n_splits: args.n_splits,
        seed: resolve_seed(args.seed),
        level: args.level,
        k_folds: args.folds,
        threads: resolve_threads(args.threads)?,
        ..MultiSplitConfig::default()
    };
    Ok((loaded.data, targets, config))
}

pub fn cmd_fit(args: &FitArgs) -> Result<AnalysisReport, CliError> {
    let (data, targets, config) = prepare(args)?;
    let family = GlmFamily::new(args.family);
    let start = Instant::now();
    let fit = single_split_fit(&family, &data, &targets, &config)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(AnalysisReport::from_single_split(&data, args.family, &fit, &config, secs)?)
}

pub fn cmd_multifit(args: &FitArgs) -> Result<AnalysisReport, CliError> {
    if args.targets.is_empty() {
        return Err(CliError::usage("multifit needs --targets"));
    }
    let (data, targets, config) = prepare(args)?;
    let family = GlmFamily::new(args.family);
    let start = Instant::now();
    let result = multi_split_fit(&family, &data, &targets, &config)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(AnalysisReport::from_multi_split(&data, args.family, &result, &config, secs)?)
}

/// Study settings from `--preset` or `--config` with overrides applied.
pub fn sim_config(args: &SimulateArgs) -> Result<SimConfig, CliError> {
    let mut config = match (&args.preset, &args.config) {
        (Some(name), None) => SimConfig::preset(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            SimConfig::from_toml(&text)?
        }
        _ => return Err(CliError::usage("simulate needs exactly one of --preset or --config")),
    };
    if let Some(r) = args.reps {
        config.n_reps = r;
    }
    if let Some(b) = args.n_splits {
        config.n_splits = b;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimOutput, CliError> {
    let config = sim_config(args)?;
    let seed = resolve_seed(args.seed);
    if let Some(path) = &args.emit_data {
        let layout = SignalLayout::new(&config);
        let data = simulate_dataset(&config, &layout, replication_seed(seed, 0))?;
        save_csv(path, &data, "y")?;
        let mut truth = String::from("name\tindex\tbeta\n");
        for &j in &layout.targets {
            truth.push_str(&format!("{}\t{j}\t{}\n", data.column_names()[j], layout.beta[j]));
        }
        return Ok(SimOutput::Truth(truth));
    }
    let threads = resolve_threads(args.threads)?;
    let table = splitdl::split::with_threads(threads, || run_study(&config, seed))??;
    Ok(SimOutput::Metrics(Box::new(table)))
}

fn write_json(path: &Option<PathBuf>, json: String) -> Result<(), CliError> {
    if let Some(p) = path {
        std::fs::write(p, json + "\n").map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

/// Run a parsed command and return the text for stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Fit(a) | Command::Multifit(a) => {
            let report = match &cli.command {
                Command::Fit(_) => cmd_fit(a)?,
                _ => cmd_multifit(a)?,
            };
            write_json(&a.out, report.to_json())?;
            Ok(report.to_table())
        }
        Command::Simulate(a) => match cmd_simulate(a)? {
            SimOutput::Metrics(m) => {
                write_json(&a.out, m.to_json())?;
                Ok(m.to_tsv())
            }
            SimOutput::Truth(t) => Ok(t),
        },
    }
}

//! Command-line front end: simulate datasets, calibrate, evaluate against
//! ground truth and emit plot data.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 configuration,
//! 4 data, 5 convergence. Failures print one JSON object on stderr.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{LoadedConfig, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "radimu", version, about = "Spatiotemporal calibration of radar and IMU suites")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// RNG seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset: sensor CSVs, truth.json and a run.toml roster.
    Simulate,
    /// Calibrate the configured roster and write report.json.
    Calibrate,
    /// Compare reports with ground truth; aggregates over several reports.
    Evaluate {
        /// Calibration reports.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Ground-truth report, once or once per report; defaults to the
        /// config's truth file.
        #[arg(long)]
        truth: Vec<PathBuf>,
    },
    /// Write plot data for a report; with --config also the sparsity grid.
    Plot {
        report: PathBuf,
        /// Spline sampling step [s].
        #[arg(long, default_value_t = 0.01)]
        step: f64,
    },
    /// Calibrate once per knot spacing and tabulate the errors.
    SweepKnots {
        /// Knot spacings [ms].
        #[arg(long, value_delimiter = ',', default_values_t = [20.0, 40.0, 80.0, 100.0, 140.0, 180.0])]
        spacings: Vec<f64>,
    },
}

const DEFAULT_OUTPUT: &str = "radimu-out";

fn load(cli: &Cli, required: bool) -> Result<Option<LoadedConfig>, CliError> {
    let Some(path) = &cli.config else {
        return if required { Err(CliError::Config("--config is required".into())) } else { Ok(None) };
    };
    let mut lc = LoadedConfig::read(path)?;
    if let Some(seed) = cli.seed {
        lc.config.seed = seed;
    }
    lc.config.validate()?;
    Ok(Some(lc))
}

fn output_dir(cli: &Cli, lc: Option<&LoadedConfig>) -> PathBuf {
    if let Some(o) = &cli.output {
        return o.clone();
    }
    match lc.and_then(|l| l.config.output.as_deref().map(|o| l.resolve(o))) {
        Some(o) => o,
        None => Path::new(DEFAULT_OUTPUT).to_path_buf(),
    }
}

fn init_threads(n: Option<usize>) -> Result<(), CliError> {
    match n {
        Some(0) => Err(CliError::Config("threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string())),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let needs_config = matches!(cli.command, Command::Calibrate | Command::SweepKnots { .. });
    let lc = load(&cli, needs_config)?;
    init_threads(cli.threads.or(lc.as_ref().and_then(|l| l.config.threads)))?;
    let out = output_dir(&cli, lc.as_ref());
    match &cli.command {
        Command::Simulate => {
            let mut cfg: RunConfig = lc.map(|l| l.config).unwrap_or_default();
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            commands::simulate_cmd(&cfg, &out)
        }
        Command::Calibrate => commands::calibrate_cmd(lc.as_ref().expect("config required"), &out),
        Command::Evaluate { reports, truth } => {
            let truths = if truth.is_empty() { lc.as_ref().and_then(LoadedConfig::truth_path).into_iter().collect() } else { truth.clone() };
            if truths.is_empty() {
                return Err(CliError::Config("no truth given: use --truth or a config with a truth file".into()));
            }
            commands::evaluate_cmd(reports, &truths, cli.output.as_deref())
        }
        Command::Plot { report, step } => commands::plot_cmd(report, lc.as_ref(), &out, *step),
        Command::SweepKnots { spacings } => commands::sweep_knots_cmd(lc.as_ref().expect("config required"), &out, spacings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use horolab::experiment::{
    csv_window, emit_series, run_with_trajectory, ExperimentConfig, RunError,
};
use horolab::PluginRegistry;

const EXIT_INVALID: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_STRICT_FAIL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "horolab",
    version,
    about = "Asymptotics of nonexpansive maps: config-driven experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write the JSON report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Report path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's sample seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Exit with status 3 if any verdict is FAIL.
        #[arg(long)]
        strict: bool,
        /// Record wall time in the report (makes reports non-reproducible).
        #[arg(long)]
        timing: bool,
        /// Also write the orbit as CSV (norms, step norms, coordinates).
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Print one data series of a report as `n,value` CSV.
    Series {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        name: String,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl ToString) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::from_json(&read(path)?).map_err(Failure::invalid)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let plugins = PluginRegistry::new();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            strict,
            timing,
            trajectory,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let started = Instant::now();
            let (mut report, traj) = run_with_trajectory(&cfg, &plugins).map_err(|e| match e {
                RunError::Invalid(v) => Failure::invalid(v),
                other => Failure::runtime(other),
            })?;
            if timing {
                report.wall_time_ms = Some(started.elapsed().as_secs_f64() * 1e3);
            }
            if let Some(path) = trajectory {
                fs::write(&path, traj.to_csv(Some(csv_window(&cfg))))
                    .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
            }
            let json = report.to_json();
            match out {
                Some(path) => fs::write(&path, json)
                    .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?,
                None => print!("{json}"),
            }
            for r in &report.results {
                eprintln!("{:?}: {}", r.experiment, r.verdict);
            }
            if strict && report.any_fail() {
                return Err(Failure {
                    code: EXIT_STRICT_FAIL,
                    message: "at least one verdict is FAIL".into(),
                });
            }
            Ok(())
        }
        Command::Series { report, name } => {
            let csv = emit_series(&read(&report)?, &name).map_err(Failure::invalid)?;
            print!("{csv}");
            Ok(())
        }
        Command::Validate { config } => {
            load_config(&config)?
                .validate(&plugins)
                .map_err(Failure::invalid)?;
            println!("ok");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use vfedmh::calibration::{run_bound_check, BoundCheckConfig, CalibrationError};
use vfedmh::data::{synth_blobs_with, write_csv, BlobConfig, DEFAULT_SEPARATION};
use vfedmh::metrics::{ledger_check, MetricsError, RoundLedger};

mod config;
mod run;

/// Violation rate above which `bound-check` fails.
const MAX_VIOLATION_RATE: f64 = 0.05;

#[derive(Debug)]
pub enum CliError {
    /// Exit 2.
    Config(String),
    /// Exit 3.
    Runtime(String),
    /// A check ran and failed; exit 1.
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "vfedmh", version, about = "Vertical federated learning with heterogeneous local models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train with the method and parties of a TOML config; writes metrics.csv and summary.json.
    Run {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Compare a convex calibration run against the contraction bound.
    BoundCheck {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Write a synthetic blobs dataset as train.csv and test.csv.
    Synth {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        dims: usize,
        #[arg(long, default_value_t = 0.5)]
        spread: f64,
        #[arg(long, default_value_t = DEFAULT_SEPARATION)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Round accounting of a finished run.
    Ledger {
        summary: PathBuf,
        /// Model count for the prediction-aggregation comparison.
        #[arg(long, default_value_t = 3)]
        models: u64,
    },
    /// One passive party of a tcp session (started by `run` in tcp mode).
    Party {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        id: u16,
        /// Active party address; defaults to the config's.
        #[arg(long)]
        connect: Option<String>,
        /// Where to write this party's results as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Run { config } => {
            let out = run::cmd_run(&config)?;
            let s = out.summary();
            println!("method {} over {} parties, {} epochs", s.method, s.parties, s.epochs);
            for (k, (acc, loss)) in s.final_test_acc.iter().zip(&s.final_train_loss).enumerate() {
                println!("party {k}: test accuracy {:.4}, train loss {:.4}", acc, loss);
            }
            if s.method != "local" {
                println!("{}", s.ledger_report);
            }
            Ok(())
        }
        Cmd::BoundCheck { config } => bound_check(&config),
        Cmd::Synth {
            output,
            samples,
            classes,
            dims,
            spread,
            separation,
            seed,
            test_fraction,
        } => {
            if !(0.0..1.0).contains(&test_fraction) {
                return Err(CliError::Config(format!("test_fraction {test_fraction} is outside [0, 1)")));
            }
            let all = synth_blobs_with(&BlobConfig {
                samples,
                classes,
                dims,
                spread,
                separation,
                seed,
            })
            .map_err(|e| CliError::Config(e.to_string()))?;
            fs::create_dir_all(&output).map_err(|e| CliError::Runtime(format!("{}: {e}", output.display())))?;
            let n_test = (samples as f64 * test_fraction).round() as usize;
            let (train, test) = all.split_at(samples - n_test);
            let io = |e: vfedmh::data::DataError| CliError::Runtime(e.to_string());
            write_csv(&train, &output.join("train.csv")).map_err(io)?;
            write_csv(&test, &output.join("test.csv")).map_err(io)?;
            println!("wrote {} train and {} test rows to {}", train.len(), test.len(), output.display());
            Ok(())
        }
        Cmd::Ledger { summary, models } => ledger(&summary, models),
        Cmd::Party {
            config,
            id,
            connect,
            report,
        } => run::cmd_party(&config, id, connect.as_deref(), report.as_deref()),
    }
}

fn bound_check(path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: BoundCheckConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let report = run_bound_check(&cfg).map_err(|e| match e {
        CalibrationError::Metrics(m @ (MetricsError::NotConvex(_) | MetricsError::InvalidBound(_))) => {
            CliError::Config(m.to_string())
        }
        CalibrationError::Invalid(m) => CliError::Config(m),
        other => CliError::Runtime(other.to_string()),
    })?;
    let rate = report.violation_rate();
    println!(
        "violations {} of {} steps ({:.2}%) over {} runs",
        report.violations,
        report.steps,
        100.0 * rate,
        report.runs.len()
    );
    println!("fixed point {:.6}", report.fixed_point);
    if !report.informative {
        eprintln!("warning: contraction factor outside (0, 1); the bound says nothing here");
        println!("non-informative");
        return Ok(());
    }
    if rate > MAX_VIOLATION_RATE {
        return Err(CliError::Check(format!("violation rate {:.2}% exceeds 5%", 100.0 * rate)));
    }
    Ok(())
}

/// Only the ledger is needed; other summary fields may hold nulls.
#[derive(Deserialize)]
struct LedgerOnly {
    ledger: RoundLedger,
}

fn ledger(path: &Path, models: u64) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let s: LedgerOnly = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let report = ledger_check(&s.ledger, s.ledger.epochs, models);
    println!("{report}");
    if !report.consistent() {
        return Err(CliError::Check("observed messages differ from the per-batch count".into()));
    }
    Ok(())
}

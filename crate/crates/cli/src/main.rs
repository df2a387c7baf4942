//! `cpokit` command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or usage
//! error, 3 runtime failure (training error, unwritable output).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use cpokit_core::analysis::write_bounds_csv;
use cpokit_core::trainer::{
    train_with_observer, write_run_json, Algorithm, RunConfig, RunCsvWriter, RunSummary, TrainError,
};
use cpokit_core::verification::{run_suite, Suite, SuiteReport, VerifyError, VerifyOptions};
use serde::Serialize;
use thiserror::Error;

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "cpokit", version, about = "Constrained policy optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy from a JSON run configuration.
    Train(TrainArgs),
    /// Run verification suites against the reference oracles.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration (JSON, field names as in the run config).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed, or an inclusive range `A..B` to train one run per seed.
    #[arg(long)]
    seed: Option<SeedSpec>,
    /// Override the algorithm from the configuration.
    #[arg(long)]
    algo: Option<Algorithm>,
    /// Worker threads for seed sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Record wall-clock milliseconds per iteration (makes run.csv non-reproducible).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Suite name, or `all` for every suite except `behavior`.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Directory for CSV artifacts and the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the behavior suite.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum SeedSpec {
    Single(u64),
    Range(u64, u64),
}

impl SeedSpec {
    fn seeds(&self) -> Vec<u64> {
        match *self {
            Self::Single(s) => vec![s],
            Self::Range(a, b) => (a..=b).collect(),
        }
    }
}

impl FromStr for SeedSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |x: &str| x.trim().parse::<u64>().map_err(|e| format!("invalid seed '{x}': {e}"));
        match s.split_once("..") {
            None => parse(s).map(Self::Single),
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(format!("empty seed range {s}"));
                }
                Ok(Self::Range(a, b))
            }
        }
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Runtime(_) => EXIT_RUNTIME,
            Self::VerifyFailed(_) => EXIT_VERIFY_FAILED,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Json(_) => Self::Config(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::UnknownSuite(_) => Self::Config(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn init_logging() -> Result<(), CliError> {
    let level = match std::env::var("CPOKIT_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => {
            return Err(CliError::Config(format!(
                "CPOKIT_LOG must be one of quiet, info, debug (got '{other}')"
            )))
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn load_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(algo) = args.algo {
        cfg.algorithm = algo;
    }
    if let Some(SeedSpec::Single(s)) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train one run and write `run.csv`, `run.json` (and `bounds.csv` when
/// bound reports are requested) into `dir`.
fn train_one(cfg: &RunConfig, dir: &Path, wall_clock: bool) -> Result<RunSummary, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let csv_path = dir.join("run.csv");
    let mut writer = RunCsvWriter::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let out = train_with_observer(cfg, wall_clock, &mut |r| writer.write(r))?;
    writer.finish()?;
    let summary = RunSummary::new(cfg, &out);
    write_run_json(&dir.join("run.json"), &summary)?;
    if cfg.bounds {
        let reports: Vec<_> = out.records.iter().filter_map(|r| r.bound_report.clone()).collect();
        write_bounds_csv(&dir.join("bounds.csv"), &reports).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    log::info!(
        "{} seed {}: final jc {:.4}, jr {:.4}, {} skipped iterations -> {}",
        cfg.algorithm,
        cfg.seed,
        summary.final_jc,
        summary.final_jr,
        summary.skipped_iterations,
        dir.display()
    );
    Ok(summary)
}

#[derive(Debug, Serialize)]
struct SeedResult {
    seed: u64,
    dir: String,
    final_jc: f64,
    final_jr: f64,
    cumulative_violation: f64,
}

/// Mean and population standard deviation.
#[derive(Debug, Serialize)]
struct Stat {
    mean: f64,
    std: f64,
}

impl Stat {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Serialize)]
struct Aggregate {
    algorithm: Algorithm,
    seeds: Vec<u64>,
    final_jc: Stat,
    final_jr: Stat,
    cumulative_violation: Stat,
    runs: Vec<SeedResult>,
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let base = load_config(args)?;
    let seeds = match &args.seed {
        Some(spec @ SeedSpec::Range(..)) => spec.seeds(),
        _ => {
            train_one(&base, &args.out, args.wall_clock)?;
            return Ok(());
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    let results: Vec<(u64, PathBuf, RunSummary)> = pool.install(|| {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&seed| {
                let mut cfg = base.clone();
                cfg.seed = seed;
                let dir = args.out.join(format!("seed_{seed}"));
                train_one(&cfg, &dir, args.wall_clock).map(|s| (seed, dir, s))
            })
            .collect::<Result<_, _>>()
    })?;
    let runs: Vec<SeedResult> = results
        .into_iter()
        .map(|(seed, dir, s)| SeedResult {
            seed,
            dir: dir.file_name().map_or_else(String::new, |d| d.to_string_lossy().into_owned()),
            final_jc: s.final_jc,
            final_jr: s.final_jr,
            cumulative_violation: s.cumulative_violation,
        })
        .collect();
    let column = |f: fn(&SeedResult) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let agg = Aggregate {
        algorithm: base.algorithm,
        seeds: seeds.clone(),
        final_jc: Stat::of(&column(|r| r.final_jc)),
        final_jr: Stat::of(&column(|r| r.final_jr)),
        cumulative_violation: Stat::of(&column(|r| r.cumulative_violation)),
        runs,
    };
    let path = args.out.join("aggregate.json");
    let text = serde_json::to_string_pretty(&agg).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    log::info!(
        "{} over seeds {:?}: final jc {:.4} +- {:.4}",
        base.algorithm,
        seeds,
        agg.final_jc.mean,
        agg.final_jc.std
    );
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let suites: Vec<Suite> = if args.suite == "all" {
        Suite::FAST.to_vec()
    } else {
        vec![args.suite.parse()?]
    };
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let opts = VerifyOptions {
        out_dir: args.out.clone(),
        jobs: args.jobs,
    };
    let mut reports: Vec<SuiteReport> = Vec::new();
    for suite in suites {
        let report = run_suite(suite, &opts)?;
        print!("{report}");
        reports.push(report);
    }
    let total: usize = reports.iter().map(|r| r.checks.len()).sum();
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failures().map(move |c| format!("{}: {}", r.suite, c.name)))
        .collect();
    println!("{}/{} checks passed", total - failed.len(), total);
    if let Some(dir) = &args.out {
        let path = dir.join("verify.json");
        let text = serde_json::to_string_pretty(&reports).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(failed.join("; ")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_spec_parses() {
        assert_eq!("7".parse::<SeedSpec>().unwrap(), SeedSpec::Single(7));
        assert_eq!("1..5".parse::<SeedSpec>().unwrap().seeds(), vec![1, 2, 3, 4, 5]);
        assert!("5..1".parse::<SeedSpec>().is_err());
        assert!("a..2".parse::<SeedSpec>().is_err());
    }

    #[test]
    fn population_std() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
    }
}

//! Command-line front end: config loading, command dispatch and artifact output.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lds::Trajectory;
use crate::numerics::{norm2, sub_vec};
use crate::pipeline::{
    aggregate_by, build_experiment, fit_loglog_slope, identify_experiment, median, regret_sweep, run_algorithm1,
    run_known_experiment, sysid_sweep, Algorithm1Run, ExperimentConfig, Precision, RegretReport, ResolvedParams,
    RunOptions, SweepRow,
};
use crate::scalar::Real;
use crate::sysid::recovery_error;
use crate::verify::{run_suite, CheckRecord, SuiteConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "nsc", version, about = "Explore-then-commit control of unknown linear systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exploration and recovery of (A, B) only.
    Sysid {
        #[command(flatten)]
        common: CommonArgs,
        /// Sweep T0 and seeds from the config's `sweep` section instead.
        #[arg(long)]
        sweep: bool,
    },
    /// Full two-phase run with regret against the linear comparator.
    Control {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Regret over the configured horizons and seeds, with a log-log fit.
    RegretSweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Randomized bound and identity checks.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Random instances per matrix inequality.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Gradient controller with the true system known.
    KnownGpc {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Record wall-clock runtimes in sweep rows (makes output nondeterministic).
    #[arg(long)]
    pub timing: bool,
}

impl Command {
    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::Sysid { common, .. }
            | Command::Control { common }
            | Command::RegretSweep { common }
            | Command::Verify { common, .. }
            | Command::KnownGpc { common } => common,
        }
    }
}

/// Reads and validates a JSON config.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

/// Sets up logging from `NSC_LOG` (`quiet`, `info` or `debug`; warnings otherwise).
pub fn init_logging() {
    let level = match std::env::var("NSC_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("info") => log::LevelFilter::Info,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Warn,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub const TRACE_COLUMNS: [&str; 6] = ["t", "phase", "cost", "state_norm", "control_norm", "dist_err"];
pub const SWEEP_COLUMNS: [&str; 7] = ["T", "T0", "regret", "eps_A", "eps_B", "seed", "runtime_ms"];

/// One line per step; `dist_err = ||w_t - w_hat_t||` with `w_hat = 0` before `T0`.
pub fn write_trace<T: Real>(path: &Path, traj: &Trajectory<T>, phase2_start: usize) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(csv_error)?;
    wtr.write_record(TRACE_COLUMNS).map_err(csv_error)?;
    for t in 0..traj.len() {
        let x: Vec<f64> = traj.states[t].iter().map(|v| v.as_f64()).collect();
        let u: Vec<f64> = traj.controls[t].iter().map(|v| v.as_f64()).collect();
        let w: Vec<f64> = traj.disturbances[t].iter().map(|v| v.as_f64()).collect();
        let dist_err = match traj.estimated.as_ref().and_then(|e| e.get(t)) {
            Some(w_hat) => norm2(&sub_vec(&w, &w_hat.iter().map(|v| v.as_f64()).collect::<Vec<_>>())),
            None => norm2(&w),
        };
        let phase = if t < phase2_start { "explore" } else { "control" };
        wtr.write_record([
            t.to_string(),
            phase.to_string(),
            fmt_f64(traj.costs[t].as_f64()),
            fmt_f64(norm2(&x)),
            fmt_f64(norm2(&u)),
            fmt_f64(dist_err),
        ])
        .map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(csv_error)?;
    wtr.write_record(SWEEP_COLUMNS).map_err(csv_error)?;
    for r in rows {
        wtr.write_record([
            r.horizon.to_string(),
            r.t0.to_string(),
            fmt_opt(r.regret),
            fmt_opt(r.eps_a),
            fmt_opt(r.eps_b),
            r.seed.to_string(),
            r.runtime_ms.to_string(),
        ])
        .map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses a sweep CSV written by [`write_sweep`].
pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_error)?;
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header != SWEEP_COLUMNS {
        return Err(Error::InvalidInput(format!("unexpected sweep columns {header:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(csv_error)).collect()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct RunDocument<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    report: &'a RegretReport,
}

#[derive(Serialize)]
struct SysIdDocument<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    params: &'a ResolvedParams,
    a_hat: Vec<Vec<f64>>,
    b_hat: Vec<Vec<f64>>,
    moments: Vec<Vec<Vec<f64>>>,
    eps_a: f64,
    eps_b: f64,
}

#[derive(Serialize)]
struct SweepDocument<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    /// Fitted on the per-`T` mean regret (or per-`T0` median `eps_A`).
    slope: Option<f64>,
    points: Vec<(f64, f64)>,
    rows: usize,
}

#[derive(Serialize)]
struct VerifyDocument<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    pass: usize,
    fail: usize,
    skip: usize,
    info: usize,
}

fn run_two_phase<T: Real>(cfg: &ExperimentConfig, known: bool) -> Result<Algorithm1Run<T>> {
    let exp = build_experiment::<T>(cfg, cfg.seed)?;
    if known {
        run_known_experiment(&exp, true)
    } else {
        run_algorithm1(
            &exp,
            &RunOptions {
                comparator: true,
                ..Default::default()
            },
        )
    }
}

fn control_command<T: Real>(cfg: &ExperimentConfig, out: &Path, known: bool) -> Result<()> {
    let run = run_two_phase::<T>(cfg, known)?;
    write_trace(&out.join("trace.csv"), &run.trajectory, run.phase2_start)?;
    let doc = RunDocument {
        command: if known { "known-gpc" } else { "control" },
        config: cfg,
        report: &run.report,
    };
    write_json(&out.join("report.json"), &doc)
}

fn sysid_command<T: Real>(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let exp = build_experiment::<T>(cfg, cfg.seed)?;
    let (run, est) = identify_experiment(&exp)?;
    write_trace(&out.join("trace.csv"), &run.trajectory, run.trajectory.len())?;
    let (eps_a, eps_b) = recovery_error(&est.a_hat, &est.b_hat, &exp.instance.system);
    let doc = SysIdDocument {
        command: "sysid",
        config: cfg,
        params: &exp.params,
        a_hat: est.a_hat.to_f64_rows(),
        b_hat: est.b_hat.to_f64_rows(),
        moments: est.moments.iter().map(|m| m.to_f64_rows()).collect(),
        eps_a,
        eps_b,
    };
    write_json(&out.join("report.json"), &doc)
}

fn sweep_document<'a>(command: &'a str, cfg: &'a ExperimentConfig, rows: &[SweepRow]) -> SweepDocument<'a> {
    let (xs, ys) = if command == "regret-sweep" {
        let pairs: Vec<(usize, f64)> = rows.iter().filter_map(|r| r.regret.map(|v| (r.horizon, v))).collect();
        aggregate_by(&pairs, |g| g.iter().sum::<f64>() / g.len() as f64)
    } else {
        let pairs: Vec<(usize, f64)> = rows.iter().filter_map(|r| r.eps_a.map(|v| (r.t0, v))).collect();
        aggregate_by(&pairs, median)
    };
    SweepDocument {
        command,
        config: cfg,
        slope: fit_loglog_slope(&xs, &ys).ok(),
        points: xs.into_iter().zip(ys).collect(),
        rows: rows.len(),
    }
}

fn sweep_command<T: Real>(cfg: &ExperimentConfig, out: &Path, timing: bool, regret: bool) -> Result<()> {
    let rows = if regret {
        regret_sweep::<T>(cfg, &cfg.sweep.horizons, &cfg.sweep.seeds, timing)?
    } else {
        sysid_sweep::<T>(cfg, &cfg.sweep.explore_horizons, &cfg.sweep.seeds, timing)?
    };
    write_sweep(&out.join("sweep.csv"), &rows)?;
    let name = if regret { "regret-sweep" } else { "sysid-sweep" };
    write_json(&out.join("report.json"), &sweep_document(name, cfg, &rows))
}

fn verify_command(cfg: &ExperimentConfig, out: &Path, instances: usize) -> Result<bool> {
    let suite = SuiteConfig {
        seed: cfg.seed,
        lemma_instances: instances,
        ..Default::default()
    };
    let rows = run_suite(cfg, &suite)?;
    let mut wtr = csv::Writer::from_path(out.join("verify.csv")).map_err(csv_error)?;
    for r in &rows {
        wtr.serialize(CheckRecord::from(r)).map_err(csv_error)?;
    }
    wtr.flush()?;
    let count = |label: &str| rows.iter().filter(|r| r.outcome.status.label() == label).count();
    let doc = VerifyDocument {
        command: "verify",
        config: cfg,
        pass: count("pass"),
        fail: count("fail"),
        skip: count("skip"),
        info: count("info"),
    };
    for r in rows.iter().filter(|r| r.outcome.failed()) {
        log::warn!("{r}");
    }
    log::info!("verify: {} pass, {} fail, {} skip", doc.pass, doc.fail, doc.skip);
    write_json(&out.join("report.json"), &doc)?;
    Ok(doc.fail == 0)
}

fn load(common: &CommonArgs, required: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None if required => return Err(Error::config("--config", "a config file is required")),
        None => ExperimentConfig::example(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cmd: &Command) -> Result<bool> {
    let common = cmd.common();
    if let Some(n) = common.jobs {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cfg = load(common, !matches!(cmd, Command::Verify { .. }))?;
    fs::create_dir_all(&common.out)?;
    let out = common.out.as_path();
    macro_rules! typed {
        ($f:ident($($arg:expr),*)) => {
            match cfg.precision {
                Precision::F64 => $f::<f64>($($arg),*),
                Precision::F32 => $f::<f32>($($arg),*),
            }
        };
    }
    match cmd {
        Command::Sysid { sweep: false, .. } => typed!(sysid_command(&cfg, out))?,
        Command::Sysid { sweep: true, .. } => typed!(sweep_command(&cfg, out, common.timing, false))?,
        Command::Control { .. } => typed!(control_command(&cfg, out, false))?,
        Command::KnownGpc { .. } => typed!(control_command(&cfg, out, true))?,
        Command::RegretSweep { .. } => typed!(sweep_command(&cfg, out, common.timing, true))?,
        Command::Verify { instances, .. } => return verify_command(&cfg, out, *instances),
    }
    Ok(true)
}

/// Runs one command and returns the process exit code.
pub fn run_command(cmd: &Command) -> i32 {
    match dispatch(cmd) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_NUMERICAL,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("T0", "x")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Unstable { radius: 1.2, limit: 1.0 }), EXIT_NUMERICAL);
    }

    #[test]
    fn commands_parse() {
        let cli = Cli::try_parse_from(["nsc", "regret-sweep", "--config", "c.json", "--out", "o", "--seed", "3", "--jobs", "2"]).unwrap();
        let c = cli.command.common();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.jobs, Some(2));
        assert!(!c.timing);
        assert!(Cli::try_parse_from(["nsc", "bogus"]).is_err());
        assert!(matches!(Cli::try_parse_from(["nsc", "known-gpc"]).unwrap().command, Command::KnownGpc { .. }));
    }
}

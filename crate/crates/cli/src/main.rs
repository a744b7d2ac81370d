//! `cyber0` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure (or a failed verify
//! check), 2 bad config or arguments, 3 divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cyber0::federation::{csv_string, run_with, run_with_threads, Problem, RunOutput};
use cyber0::verify::{lemma_suite, theorem_suite, Check};
use cyber0::{Error, ExperimentConfig};

const VERSION: &str = env!("CYBER0_VERSION");

#[derive(Parser)]
#[command(name = "cyber0", version = VERSION, about = "Byzantine-resilient federated zero-order optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write log.csv plus a manifest.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the Monte-Carlo and convergence checks.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run one experiment per value of a config key.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Lemmas,
    Theorems,
    All,
}

/// Failure classes that map to distinct exit codes.
enum Failure {
    Usage(anyhow::Error),
    Diverged(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config { .. } | Error::InvalidArgument(_)) => Failure::Usage(e),
            Some(Error::Divergence { .. }) => Failure::Diverged(e),
            _ => Failure::Other(e),
        }
    }
}

fn threads() -> Option<usize> {
    std::env::var("CYBER0_THREADS").ok()?.parse().ok()
}

fn execute(cfg: &ExperimentConfig, problem: &Problem) -> cyber0::Result<RunOutput> {
    match threads() {
        Some(n) => run_with_threads(cfg, problem, n),
        None => run_with(cfg, problem),
    }
}

fn manifest(cfg: &ExperimentConfig, wall_ms: u128, outputs: &[&str]) -> String {
    let mut text = format!("# cyber0 run manifest\n# version = {VERSION}\n# wall_ms = {wall_ms}\n");
    for o in outputs {
        text.push_str(&format!("# output = {o}\n"));
    }
    text.push_str(&cfg.to_text());
    text
}

/// Runs `cfg` and writes `log.csv` and `manifest` into `out`.
fn run_into(cfg: &ExperimentConfig, problem: &Problem, out: &Path) -> Result<RunOutput> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let start = Instant::now();
    let result = execute(cfg, problem)?;
    let wall = start.elapsed().as_millis();
    let log = out.join("log.csv");
    fs::write(&log, csv_string(&result.logs)).with_context(|| format!("writing {}", log.display()))?;
    let path = out.join("manifest");
    fs::write(&path, manifest(cfg, wall, &["log.csv"])).with_context(|| format!("writing {}", path.display()))?;
    Ok(result)
}

fn cmd_run(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let problem = Problem::build(&cfg).context("preparing data")?;
    let result = run_into(&cfg, &problem, out)?;
    let last = result.final_log();
    println!(
        "step {} train_loss {:.6} test_acc {} -> {}",
        last.step,
        last.train_loss,
        last.test_acc.map_or("-".into(), |a| format!("{a:.4}")),
        out.join("log.csv").display()
    );
    Ok(())
}

fn cmd_verify(suite: Suite, seed: u64) -> Result<bool, Failure> {
    let mut checks: Vec<Check> = Vec::new();
    if matches!(suite, Suite::Lemmas | Suite::All) {
        checks.extend(lemma_suite(seed));
    }
    if matches!(suite, Suite::Theorems | Suite::All) {
        checks.extend(theorem_suite().map_err(anyhow::Error::from)?);
    }
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(failed == 0)
}

fn cmd_sweep(config: &Path, param: &str, values: &str, out: &Path) -> Result<(), Failure> {
    let base = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::Usage(anyhow::anyhow!("--values lists no values")));
    }
    let mut configs = Vec::new();
    for v in &values {
        let mut cfg = base.clone();
        cfg.set(param, v)
            .map_err(|m| Failure::Usage(anyhow::anyhow!("{param} = {v}: {m}")))?;
        cfg.validate().map_err(|e| Failure::Usage(e.into()))?;
        configs.push(cfg);
    }
    let mut summary = String::from("param,value,step,train_loss,test_acc,uplink_scalars,downlink_scalars\n");
    let mut problem: Option<Problem> = None;
    for (v, cfg) in values.iter().zip(&configs) {
        // Runs share loaded data unless the swept key changes it.
        let reusable = problem.is_some() && !matches!(param, "dataset" | "data_dir" | "model" | "data_seed" | "seed")
            && !param.starts_with("synth_")
            && !param.starts_with("quad_");
        if !reusable {
            problem = Some(Problem::build(cfg).context("preparing data")?);
        }
        let dir = out.join(format!("{param}={v}"));
        let result = run_into(cfg, problem.as_ref().expect("built above"), &dir)?;
        let last = result.final_log();
        summary.push_str(&format!(
            "{param},{v},{},{},{},{},{}\n",
            last.step,
            last.train_loss,
            last.test_acc.map(|a| a.to_string()).unwrap_or_default(),
            last.uplink_scalars,
            last.downlink_scalars
        ));
        println!("{param} = {v}: {}", dir.join("log.csv").display());
    }
    let path = out.join("summary.csv");
    fs::write(&path, summary).with_context(|| format!("writing {}", path.display()))?;
    println!("summary -> {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out).map(|_| true),
        Command::Verify { suite, seed } => cmd_verify(suite, seed),
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => cmd_sweep(&config, &param, &values, &out).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(e)) => {
            eprintln!("diverged: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

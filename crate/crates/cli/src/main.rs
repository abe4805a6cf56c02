//! `speedlab` command line: run configs, verification suites and sweeps.
//!
//! Exit codes: 0 success, 1 failure, 2 config error, 3 verification passed
//! with recorded discrepancies only.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use speedlab::experiment::{execute, Mode, Outcome, RunConfig};
use speedlab::verify::Suite;
use speedlab::SpeedError;

#[derive(Parser, Debug)]
#[command(
    name = "speedlab",
    version,
    about = "Screened curriculum experiments on a simulated rollout clock"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run verification checks.
    Verify {
        /// Optional config; its `[verify]` section picks the suite.
        #[arg(long)]
        config: Option<PathBuf>,
        /// all, snr, phi, scheduler or one-step.
        #[arg(long)]
        suite: Option<Suite>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the `[sweep]` section of a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig, SpeedError> {
    let mut cfg = RunConfig::load(path)?;
    apply(&mut cfg, seed, out);
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, seed: Option<u64>, out: Option<PathBuf>) {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output.dir = out;
    }
}

fn config_for(command: Command) -> Result<RunConfig, SpeedError> {
    match command {
        Command::Run { config, seed, out } => load(&config, seed, out),
        Command::Sweep { config, seed, out } => {
            let mut cfg = load(&config, seed, out)?;
            cfg.mode = Mode::Sweep;
            cfg.validate()?;
            Ok(cfg)
        }
        Command::Verify {
            config,
            suite,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::parse("mode = \"verify\"\n")?,
            };
            cfg.mode = Mode::Verify;
            if let Some(suite) = suite {
                cfg.verify.suite = suite;
            }
            apply(&mut cfg, seed, out);
            Ok(cfg)
        }
    }
}

fn report(outcome: &Outcome) -> anyhow::Result<()> {
    match outcome {
        Outcome::Run(summary) => {
            for run in &summary.runs {
                println!(
                    "{}: {:.1}s simulated, {} updates, {} engine calls",
                    run.method, run.clock.total_seconds, run.counters.updates, run.counters.engine_calls
                );
                for (target, time) in &run.time_to_target {
                    match time {
                        Some(t) => println!("  time to {target}: {t:.1}s"),
                        None => println!("  time to {target}: not reached"),
                    }
                }
            }
            for (target, ratio) in &summary.speedup {
                match ratio {
                    Some(r) => println!("speedup at {target}: {r:.2}x"),
                    None => println!("speedup at {target}: n/a"),
                }
            }
        }
        Outcome::Verify(report) => {
            for check in &report.checks {
                println!("{:?} [{}] {}: {}", check.status, check.suite, check.name, check.detail);
            }
        }
        Outcome::Sweep { rows, .. } => {
            println!(
                "{:>10} {:>8} {:>8} {:>12} {:>10}",
                "axis", "value", "target", "time_s", "speedup"
            );
            for row in rows {
                let time = row.time_to_target.map_or("-".to_string(), |t| format!("{t:.1}"));
                let speedup = row.speedup_vs_first.map_or("-".to_string(), |s| format!("{s:.2}"));
                println!(
                    "{:>10} {:>8} {:>8} {:>12} {:>10}",
                    row.axis, row.value, row.target, time, speedup
                );
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let cfg = match config_for(cli.command) {
        Ok(cfg) => cfg,
        Err(err @ SpeedError::Config { .. }) => {
            eprintln!("error: {err}");
            return Ok(2);
        }
        Err(err) => bail!(err),
    };
    let outcome = match execute(&cfg) {
        Ok(outcome) => outcome,
        Err(err @ SpeedError::Config { .. }) => {
            eprintln!("error: {err}");
            return Ok(2);
        }
        Err(err) => return Err(err).with_context(|| format!("run failed (outputs in {})", cfg.output.dir.display())),
    };
    report(&outcome)?;
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

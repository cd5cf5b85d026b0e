use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use dho2_cli::config::{ConfigError, ExperimentConfig, Overrides};
use dho2_cli::report::{comm_report, load_run_config, memory_report, DEFAULT_SWEEP};
use dho2_cli::run::run_experiment;

// Ignores closed pipes, e.g. `dho2 run ... | head -1`.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "dho2", version, about = "Hybrid first/second-order training on simulated workers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train as configured and write metrics, ledger and summary files.
    Run {
        /// Config file, or one of the built-in presets: quadratic, two-gaussians, rings.
        #[arg(long)]
        config: String,
        #[arg(long)]
        trainer: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base optimizer: sgd, momentum, adam, adamw or zero.
        #[arg(long)]
        base: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        /// threaded or round-robin.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        schedule_seed: Option<u64>,
    },
    /// Accounting reports over a finished run directory.
    Report {
        kind: ReportKind,
        #[arg(long = "in")]
        input: PathBuf,
        /// Worker counts for the memory sweep.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP)]
        workers: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Memory,
    Comm,
}

fn load(config: &str) -> Result<ExperimentConfig, ConfigError> {
    let path = PathBuf::from(config);
    if !path.exists() {
        if let Ok(cfg) = ExperimentConfig::preset(config) {
            return Ok(cfg);
        }
    }
    ExperimentConfig::load(&path)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            trainer,
            workers,
            seed,
            out,
            base,
            lr,
            backend,
            schedule_seed,
        } => {
            let mut cfg = load(&config)?;
            cfg.apply(&Overrides {
                trainer,
                workers,
                seed,
                out,
                base,
                lr,
                backend,
                schedule_seed,
            });
            if cfg.output.dir.is_none() {
                cfg.output.dir = Some(PathBuf::from("runs").join(&cfg.experiment.name));
            }
            cfg.validate()?;
            let out = run_experiment(&cfg)?;
            let s = &out.summary;
            let dir = out.dir.as_deref().unwrap_or_else(|| "".as_ref());
            out!(
                "{} {}: {} epochs, {} iterations, final loss {}",
                s.name,
                s.trainer,
                s.epochs_run,
                s.iterations,
                s.final_loss.map_or("n/a".into(), |l| format!("{l:.6e}"))
            );
            if let Some(t) = &s.time_to_target {
                out!(
                    "reached {:e} at iteration {} (modeled {:.3} ms)",
                    t.target, t.iterations, t.modeled_ms
                );
            }
            out!("artifacts in {}", dir.display());
            if let Some(a) = &s.aborted {
                eprintln!("training aborted at epoch {}: {}", a.epoch, a.reason);
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { kind, input, workers } => match kind {
            ReportKind::Memory => {
                let cfg = load_run_config(&input)?;
                let r = memory_report(&cfg, &workers)?;
                out!("{}", r.table().trim_end());
                Ok(if r.exact() && r.scales() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                })
            }
            ReportKind::Comm => {
                let r = comm_report(&input)?;
                out!("{}", r.table().trim_end());
                Ok(if r.ok() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
            }
        },
    }
}

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lindt_core::harness::{self, ExportFormat, Metric, RunLog, ScenarioConfig, Simulation, WORKERS_ENV};

#[derive(Parser)]
#[command(name = "lindt", version, about = "Federated-learning simulator with NFL detection and dual-model recovery")]
struct Cli {
    /// Worker threads for client updates (results do not depend on it).
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its log and metrics table.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir, then ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print one line per round while running.
        #[arg(long)]
        progress: bool,
    },
    /// Re-execute a logged run and check it reproduces exactly.
    Replay { log: PathBuf },
    /// Align one metric across several logs.
    Compare {
        #[arg(required = true, num_args = 1..)]
        logs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        metric: MetricArg,
    },
    /// Re-export a log as a metrics table or a structured log.
    Export {
        log: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    WDiv,
    NoiseNorm,
    Delta,
    CentralAcc,
    LocalAcc,
    Beta,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::WDiv => Metric::WDiv,
            MetricArg::NoiseNorm => Metric::NoiseNorm,
            MetricArg::Delta => Metric::Delta,
            MetricArg::CentralAcc => Metric::CentralAcc,
            MetricArg::LocalAcc => Metric::LocalAcc,
            MetricArg::Beta => Metric::Beta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Log,
}

struct Progress;

impl harness::RoundObserver for Progress {
    fn on_round(&mut self, r: &harness::RoundRecord) {
        let acc = r.local_acc.map(|a| format!(" local_acc={a:.4}")).unwrap_or_default();
        eprintln!("round {:>4} delta={:.4} count={} flag={}{acc}", r.round, r.delta, r.count, r.flag);
    }
}

fn load_log(path: &Path) -> Result<RunLog> {
    RunLog::load(path).with_context(|| format!("reading run log {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, progress } => {
            let cfg = ScenarioConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
            let sim = Simulation::with_workers(cfg, cli.workers)?;
            let log = if progress { sim.run_to_end(&mut Progress)? } else { sim.run_to_end(&mut ())? };
            for path in harness::export(&log, &dir, &[ExportFormat::Log, ExportFormat::Table])? {
                println!("wrote {}", path.display());
            }
            if let Some(g) = &log.final_gain {
                println!("final beta {:.4}", g.beta);
            }
            for ev in &log.events {
                println!("{}", serde_json::to_string(ev)?);
            }
        }
        Command::Replay { log } => {
            let original = load_log(&log)?;
            let report = harness::replay(&original, cli.workers)?;
            if !report.identical {
                match report.first_mismatch {
                    Some(r) => bail!("replay diverged at round {r}"),
                    None => bail!("replay diverged outside the per-round records"),
                }
            }
            println!("replay identical ({} rounds)", original.rounds.len());
        }
        Command::Compare { logs, metric } => {
            let logs = logs.iter().map(|p| load_log(p)).collect::<Result<Vec<_>>>()?;
            let cmp = harness::compare_runs(&logs, metric.into())?;
            cmp.write_table(io::stdout().lock())?;
        }
        Command::Export { log, format, out } => {
            let log = load_log(&log)?;
            let format = match format {
                FormatArg::Table => ExportFormat::Table,
                FormatArg::Log => ExportFormat::Log,
            };
            for path in harness::export(&log, &out, &[format])? {
                println!("wrote {}", path.display());
            }
        }
    }
    io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

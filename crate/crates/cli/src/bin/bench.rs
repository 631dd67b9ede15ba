use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fogbus::bench::{self, MetricsReport, ScenarioSettings, ScenarioSummary};

#[derive(Parser)]
#[command(name = "bench", about = "Run the experiment matrix and check its trends")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Matrix {
    /// All 12 interval x blockchain x infrastructure cells
    Full,
}

#[derive(Subcommand)]
enum Cmd {
    Run {
        #[arg(long, value_enum, default_value = "full")]
        matrix: Matrix,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Compute workers per cluster
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// WAN round trip to the cloud, in ms
        #[arg(long)]
        rtt: Option<f64>,
        #[arg(long, default_value_t = 300)]
        duration: u64,
    },
    Assert {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn report(rows: &[ScenarioSummary]) -> Result<bool> {
    let checks = bench::assert_trends(rows)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed;
        println!("[{}] {} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.cell, c.detail);
    }
    println!("{}/{} checks passed", checks.iter().filter(|c| c.passed).count(), checks.len());
    Ok(ok)
}

#[tokio::main]
async fn main() -> Result<ExitCode> {
    let ok = match Cli::parse().cmd {
        Cmd::Run { matrix: Matrix::Full, seed, out, workers, rtt, duration } => {
            let mut base = ScenarioSettings {
                seed,
                workers,
                duration_seconds: duration,
                ..ScenarioSettings::default()
            };
            if let Some(rtt) = rtt {
                base.wan.rtt_ms = rtt;
            }
            let reports = bench::run_matrix(&base).await?;
            std::fs::write(&out, bench::export_csv(&reports)?).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {}", out.display());
            report(&reports.iter().map(MetricsReport::summary).collect::<Vec<_>>())?
        }
        Cmd::Assert { input } => {
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            report(&bench::parse_csv(&bytes)?)?
        }
    };
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

//! Load harness: runs the load, stress and soak suites against a broker and
//! turns the results into per-panel series.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use servicenet::loadgen::{plot_series, read_rows, run_suite, write_rows, write_samples, SuiteConfig, SuiteKind};

#[derive(Debug, Parser)]
#[command(name = "servicenet-bench", version, about = "ServiceNet broker load harness")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run one suite and write a row per (op, rate).
    Run {
        #[arg(long)]
        suite: SuiteKind,
        #[arg(long, env = "SERVICENET_BROKER", default_value = "ws://127.0.0.1:7400/ws")]
        broker: String,
        /// Multiplier applied to every arrival rate.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Per-client dump; defaults to `<out>.samples.csv`.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Override the run length in seconds.
        #[arg(long)]
        duration: Option<u64>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Use generated emails verbatim, so duplicates get rejected.
        #[arg(long)]
        allow_collisions: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write response-time-vs-rate series, one file per op and metric.
    Plot {
        results: PathBuf,
        #[arg(long, default_value = "figs")]
        out: PathBuf,
    },
}

async fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Cmd::Run {
            suite,
            broker,
            scale,
            out,
            samples,
            duration,
            repeats,
            allow_collisions,
            seed,
        } => {
            let mut cfg = SuiteConfig::new(suite, scale);
            if let Some(d) = duration {
                cfg.duration = std::time::Duration::from_secs(d);
            }
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            cfg.options.allow_collisions = allow_collisions;
            if let Some(s) = seed {
                cfg.options.seed = s;
            }
            let report = run_suite(&cfg, &broker, |row| {
                let s = &row.stats;
                eprintln!(
                    "{suite} {:<11} rate {:>7.1}  mean {:>9.2} ms  p95 {:>9.2} ms  p99 {:>9.2} ms  {:>8.1} req/s  errors {}",
                    s.op, s.rate, s.mean_ms, s.p95_ms, s.p99_ms, s.throughput_rps, s.errors
                );
            })
            .await?;
            for sub in &report.subtracted {
                eprintln!(
                    "{suite} {} - {} at {:.1}/s: {:.1} req/s{}",
                    sub.op,
                    sub.baseline,
                    sub.rate,
                    sub.result.rps,
                    if sub.result.clamped { " (negative, floored)" } else { "" }
                );
            }
            write_rows(&out, &report.rows)?;
            let dump = samples.unwrap_or_else(|| out.with_extension("samples.csv"));
            write_samples(&dump, &report.samples)?;
            println!("{}", out.display());
        }
        Cmd::Plot { results, out } => {
            for path in plot_series(&read_rows(&results)?, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

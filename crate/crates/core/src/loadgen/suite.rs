use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{run_once, subtract_throughput, summarize, window_cv, LoadError, LoadOptions, Op, RunStats, Sample, Subtracted};

pub const CSV_HEADER: &str = "suite,op,rate,samples,mean_ms,median_ms,p95_ms,p99_ms,throughput_rps,errors";

const WINDOW: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Load,
    Stress,
    Soak,
}

impl SuiteKind {
    /// Arrival rates before scaling.
    pub fn base_rates(self) -> &'static [f64] {
        match self {
            SuiteKind::Load => &[50.0, 100.0, 200.0, 300.0, 500.0],
            SuiteKind::Stress => &[600.0, 700.0, 800.0, 1000.0],
            SuiteKind::Soak => &[300.0],
        }
    }

    pub fn rates(self, scale: f64) -> Vec<f64> {
        self.base_rates().iter().map(|r| r * scale).collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SuiteKind::Load => "load",
            SuiteKind::Stress => "stress",
            SuiteKind::Soak => "soak",
        }
    }
}

impl fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SuiteKind {
    type Err = LoadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "load" => Ok(SuiteKind::Load),
            "stress" => Ok(SuiteKind::Stress),
            "soak" => Ok(SuiteKind::Soak),
            _ => Err(LoadError::Parse {
                kind: "suite",
                value: s.to_owned(),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub kind: SuiteKind,
    pub scale: f64,
    pub duration: Duration,
    pub repeats: usize,
    pub ops: Vec<Op>,
    pub options: LoadOptions,
}

impl SuiteConfig {
    /// 10 s runs repeated 5 times; the soak is a single 60 s run.
    pub fn new(kind: SuiteKind, scale: f64) -> Self {
        let (duration, repeats) = match kind {
            SuiteKind::Soak => (Duration::from_secs(60), 1),
            _ => (Duration::from_secs(10), 5),
        };
        SuiteConfig {
            kind,
            scale,
            duration,
            repeats,
            ops: Op::ALL.to_vec(),
            options: LoadOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub suite: SuiteKind,
    pub stats: RunStats,
    /// Per-repeat statistics behind the averaged row.
    pub runs: Vec<RunStats>,
    /// Largest sliding-window throughput CV over the repeats.
    pub window_cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtractedRow {
    pub rate: f64,
    pub op: Op,
    pub baseline: Op,
    pub result: Subtracted,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub samples: Vec<(SuiteKind, Op, f64, Sample)>,
    /// LOGIN minus REGISTER and FETCH_PEERS minus LOGIN at each rate.
    pub subtracted: Vec<SubtractedRow>,
}

impl SuiteReport {
    pub fn row(&self, op: Op, rate: f64) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.stats.op == op && r.stats.rate == rate)
    }
}

/// Run every (rate, op) pair. Ops alternate within each repeat so slow
/// drift on the host affects all of them alike.
pub async fn run_suite(cfg: &SuiteConfig, url: &str, mut progress: impl FnMut(&SuiteRow)) -> Result<SuiteReport, LoadError> {
    if !(cfg.scale > 0.0) {
        return Err(LoadError::Scale(cfg.scale));
    }
    let mut report = SuiteReport::default();
    for rate in cfg.kind.rates(cfg.scale) {
        let mut per_op: Vec<(Op, Vec<RunStats>, f64)> = cfg.ops.iter().map(|&op| (op, Vec::new(), 0.0)).collect();
        for repeat in 0..cfg.repeats.max(1) {
            for (op, runs, cv) in per_op.iter_mut() {
                let samples = run_once(url, *op, rate, cfg.duration, repeat, &cfg.options).await?;
                runs.push(summarize(*op, rate, cfg.duration, &samples));
                *cv = cv.max(window_cv(&samples, cfg.duration, WINDOW, Duration::from_secs(1)));
                report
                    .samples
                    .extend(samples.into_iter().map(|s| (cfg.kind, *op, rate, s)));
            }
        }
        for (_, runs, cv) in per_op {
            let row = SuiteRow {
                suite: cfg.kind,
                stats: RunStats::average(&runs).expect("at least one repeat"),
                runs,
                window_cv: cv,
            };
            progress(&row);
            report.rows.push(row);
        }
        for (op, baseline) in [(Op::Login, Op::Register), (Op::FetchPeers, Op::Login)] {
            if let (Some(a), Some(b)) = (report.row(op, rate), report.row(baseline, rate)) {
                let result = subtract_throughput(&a.stats, &b.stats)?;
                report.subtracted.push(SubtractedRow { rate, op, baseline, result });
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    suite: SuiteKind,
    op: Op,
    rate: f64,
    samples: usize,
    mean_ms: f64,
    median_ms: f64,
    p95_ms: f64,
    p99_ms: f64,
    throughput_rps: f64,
    errors: usize,
}

pub fn write_rows(path: impl AsRef<Path>, rows: &[SuiteRow]) -> Result<(), LoadError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        let s = &r.stats;
        w.serialize(CsvRow {
            suite: r.suite,
            op: s.op,
            rate: s.rate,
            samples: s.samples,
            mean_ms: s.mean_ms,
            median_ms: s.median_ms,
            p95_ms: s.p95_ms,
            p99_ms: s.p99_ms,
            throughput_rps: s.throughput_rps,
            errors: s.errors,
        })?;
    }
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

/// Read rows back; fields the CSV does not carry are left at zero.
pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<SuiteRow>, LoadError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(SuiteRow {
                suite: row.suite,
                stats: RunStats {
                    op: row.op,
                    rate: row.rate,
                    duration_s: 0.0,
                    samples: row.samples,
                    mean_ms: row.mean_ms,
                    median_ms: row.median_ms,
                    p95_ms: row.p95_ms,
                    p99_ms: row.p99_ms,
                    throughput_rps: row.throughput_rps,
                    errors: row.errors,
                    faults: 0,
                },
                runs: Vec::new(),
                window_cv: 0.0,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct SampleRow<'a> {
    suite: SuiteKind,
    op: Op,
    rate: f64,
    repeat: usize,
    client: usize,
    arrival_ms: f64,
    latency_ms: f64,
    done_ms: f64,
    ok: bool,
    error: &'a str,
    fault: bool,
}

pub fn write_samples(path: impl AsRef<Path>, samples: &[(SuiteKind, Op, f64, Sample)]) -> Result<(), LoadError> {
    let mut w = csv::Writer::from_path(path)?;
    for (suite, op, rate, s) in samples {
        w.serialize(SampleRow {
            suite: *suite,
            op: *op,
            rate: *rate,
            repeat: s.repeat,
            client: s.client,
            arrival_ms: s.arrival_ms,
            latency_ms: s.latency_ms,
            done_ms: s.done_ms,
            ok: s.ok,
            error: s.error.as_deref().unwrap_or(""),
            fault: s.fault,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Write one response-time-vs-rate series per (op, metric): nine files,
/// one per figure panel.
pub fn plot_series(rows: &[SuiteRow], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, LoadError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let metrics: [(&str, fn(&RunStats) -> f64); 3] =
        [("mean", |s| s.mean_ms), ("p95", |s| s.p95_ms), ("p99", |s| s.p99_ms)];
    let mut written = Vec::new();
    for op in Op::ALL {
        let mut series: Vec<&SuiteRow> = rows.iter().filter(|r| r.stats.op == op).collect();
        series.sort_by(|a, b| a.stats.rate.total_cmp(&b.stats.rate));
        for (name, get) in metrics {
            let path = out_dir.join(format!("{}_{name}.csv", op.as_str().to_ascii_lowercase()));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["suite", "rate", &format!("{name}_ms")])?;
            for r in &series {
                w.write_record([r.suite.as_str(), &r.stats.rate.to_string(), &format!("{:.3}", get(&r.stats))])?;
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LoadError, Op, Sample};

/// Nearest-rank percentile: the value at 1-based rank ⌈q·n⌉ of the sorted
/// samples.
pub fn percentile(samples: &[f64], q: f64) -> Result<f64, LoadError> {
    if samples.is_empty() {
        return Err(LoadError::Empty);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(LoadError::Quantile(q));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

fn nearest_rank(q: f64, n: usize) -> usize {
    // 0.95 * 20 is 19.000000000000004 in binary; shave the noise before ceil.
    let r = (q * n as f64 - 1e-9).ceil() as usize;
    r.clamp(1, n)
}

/// Summary of one run or the average of several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub op: Op,
    pub rate: f64,
    pub duration_s: f64,
    /// Successful virtual clients.
    pub samples: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    /// Successful broker requests per second.
    pub throughput_rps: f64,
    /// Failed virtual clients, for any reason.
    pub errors: usize,
    /// Failures caused by the transport (connect, closed socket), a subset
    /// of `errors`.
    pub faults: usize,
}

impl RunStats {
    pub fn empty(op: Op, rate: f64, duration: Duration) -> Self {
        RunStats {
            op,
            rate,
            duration_s: duration.as_secs_f64(),
            samples: 0,
            mean_ms: 0.0,
            median_ms: 0.0,
            p95_ms: 0.0,
            p99_ms: 0.0,
            throughput_rps: 0.0,
            errors: 0,
            faults: 0,
        }
    }

    /// Average of per-run statistics; counts are summed.
    pub fn average(runs: &[RunStats]) -> Option<RunStats> {
        let first = runs.first()?;
        let n = runs.len() as f64;
        let avg = |f: fn(&RunStats) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Some(RunStats {
            op: first.op,
            rate: first.rate,
            duration_s: first.duration_s,
            samples: runs.iter().map(|r| r.samples).sum(),
            mean_ms: avg(|r| r.mean_ms),
            median_ms: avg(|r| r.median_ms),
            p95_ms: avg(|r| r.p95_ms),
            p99_ms: avg(|r| r.p99_ms),
            throughput_rps: avg(|r| r.throughput_rps),
            errors: runs.iter().map(|r| r.errors).sum(),
            faults: runs.iter().map(|r| r.faults).sum(),
        })
    }
}

/// Statistics over one run's samples. Latency figures cover successful
/// clients only; throughput is measured over the longer of the nominal
/// duration and the time until the last completion.
pub fn summarize(op: Op, rate: f64, duration: Duration, samples: &[Sample]) -> RunStats {
    let mut stats = RunStats::empty(op, rate, duration);
    let ok: Vec<f64> = samples.iter().filter(|s| s.ok).map(|s| s.latency_ms).collect();
    stats.errors = samples.len() - ok.len();
    stats.faults = samples.iter().filter(|s| s.fault).count();
    if ok.is_empty() {
        return stats;
    }
    stats.samples = ok.len();
    stats.mean_ms = ok.iter().sum::<f64>() / ok.len() as f64;
    stats.median_ms = percentile(&ok, 0.5).expect("non-empty");
    stats.p95_ms = percentile(&ok, 0.95).expect("non-empty");
    stats.p99_ms = percentile(&ok, 0.99).expect("non-empty");
    let last_done = samples.iter().map(|s| s.done_ms).fold(0.0, f64::max) / 1000.0;
    let span = duration.as_secs_f64().max(last_done);
    if span > 0.0 {
        stats.throughput_rps = (ok.len() * op.requests()) as f64 / span;
    }
    stats
}

/// Coefficient of variation of throughput over sliding windows of
/// `window` advancing by `step`, using successful completions only.
pub fn window_cv(samples: &[Sample], duration: Duration, window: Duration, step: Duration) -> f64 {
    let done: Vec<f64> = samples.iter().filter(|s| s.ok).map(|s| s.done_ms / 1000.0).collect();
    let (total, w, st) = (duration.as_secs_f64(), window.as_secs_f64(), step.as_secs_f64());
    let mut rates = Vec::new();
    let mut start = 0.0;
    loop {
        let end = (start + w).min(total.max(w));
        rates.push(done.iter().filter(|&&t| t >= start && t < end).count() as f64 / (end - start));
        start += st;
        if start + w > total + 1e-9 {
            break;
        }
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64;
    var.sqrt() / mean
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subtracted {
    pub rps: f64,
    /// The raw difference was negative and has been floored at zero.
    pub clamped: bool,
}

/// Throughput attributable to the last step of a composite operation.
pub fn subtract_throughput(composite: &RunStats, baseline: &RunStats) -> Result<Subtracted, LoadError> {
    if composite.rate != baseline.rate || composite.duration_s != baseline.duration_s {
        return Err(LoadError::Mismatch(format!(
            "{} at {}/s for {}s vs {} at {}/s for {}s",
            composite.op, composite.rate, composite.duration_s, baseline.op, baseline.rate, baseline.duration_s
        )));
    }
    let raw = composite.throughput_rps - baseline.throughput_rps;
    Ok(Subtracted {
        rps: raw.max(0.0),
        clamped: raw < 0.0,
    })
}

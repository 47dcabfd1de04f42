//! Open-loop load harness for the broker's register, login and fetch-peers
//! operations.

mod runner;
mod stats;
mod suite;

pub use runner::{run_once, run_scenario, LoadOptions, ScenarioResult};
pub use stats::{percentile, subtract_throughput, summarize, window_cv, RunStats, Subtracted};
pub use suite::{
    plot_series, read_rows, run_suite, write_rows, write_samples, SuiteConfig, SuiteKind, SuiteReport, SuiteRow,
    CSV_HEADER,
};

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("percentile of an empty sample set")]
    Empty,
    #[error("quantile must be in (0, 1], got {0}")]
    Quantile(f64),
    #[error("cannot reach broker: {0}")]
    Connect(String),
    #[error("runs differ: {0}")]
    Mismatch(String),
    #[error("scale must be positive, got {0}")]
    Scale(f64),
    #[error("unknown {kind} {value:?}")]
    Parse { kind: &'static str, value: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Composite operations: each includes the ones before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Op {
    Register,
    Login,
    FetchPeers,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Register, Op::Login, Op::FetchPeers];

    /// Broker requests one virtual client issues.
    pub fn requests(self) -> usize {
        match self {
            Op::Register => 1,
            Op::Login => 2,
            Op::FetchPeers => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Register => "REGISTER",
            Op::Login => "LOGIN",
            Op::FetchPeers => "FETCH_PEERS",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Op {
    type Err = LoadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Op::ALL
            .into_iter()
            .find(|o| o.as_str().eq_ignore_ascii_case(s))
            .ok_or(LoadError::Parse {
                kind: "op",
                value: s.to_owned(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub op: Op,
    /// Virtual clients started per second.
    pub rate: f64,
    pub duration: Duration,
    pub repeats: usize,
}

impl Scenario {
    pub fn new(op: Op, rate: f64, duration: Duration) -> Self {
        Scenario {
            op,
            rate,
            duration,
            repeats: 5,
        }
    }

    /// Number of arrivals in one run.
    pub fn arrivals(&self) -> usize {
        (self.rate * self.duration.as_secs_f64()).round().max(0.0) as usize
    }
}

/// One virtual client's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub repeat: usize,
    pub client: usize,
    /// Scheduled arrival, relative to the run start.
    pub arrival_ms: f64,
    /// Accumulated response time of the composite operation.
    pub latency_ms: f64,
    /// Completion time relative to the run start.
    pub done_ms: f64,
    pub ok: bool,
    /// Error code or message when `ok` is false.
    pub error: Option<String>,
    /// The failure was a transport fault rather than an error frame.
    pub fault: bool,
}

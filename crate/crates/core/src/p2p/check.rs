use std::future::Future;
use std::time::Duration;

use tokio::time::Instant;

use super::candidate::CandidatePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckConfig {
    pub probes_per_pair: u32,
    /// Spacing between probes on one pair; also the per-probe echo deadline.
    pub interval: Duration,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            probes_per_pair: 3,
            interval: Duration::from_millis(500),
        }
    }
}

impl CheckConfig {
    /// Upper bound on a check run over `pairs` pairs, excluding slack.
    pub fn exhaustion_bound(&self, pairs: usize) -> Duration {
        self.interval * self.probes_per_pair * pairs as u32
    }
}

/// Sends one probe on a pair and waits for its echo.
///
/// On success it hands back whatever transport the probe travelled on, so
/// the winning pair's channel can be reused for data.
pub trait Prober {
    type Link;

    fn probe(&mut self, pair: &CandidatePair, attempt: u32) -> impl Future<Output = Option<Self::Link>>;
}

#[derive(Debug)]
pub enum PairResult<L> {
    Selected { pair: CandidatePair, link: L, probes: u32 },
    Failed { probes: u32 },
}

impl<L> PairResult<L> {
    pub fn pair(&self) -> Option<&CandidatePair> {
        match self {
            PairResult::Selected { pair, .. } => Some(pair),
            PairResult::Failed { .. } => None,
        }
    }
}

/// Probe pairs in the given (descending priority) order and return the
/// first one that answers.
pub async fn check_pairs<P: Prober>(pairs: &[CandidatePair], prober: &mut P, cfg: CheckConfig) -> PairResult<P::Link> {
    let mut probes = 0;
    for pair in pairs {
        for attempt in 0..cfg.probes_per_pair {
            let started = Instant::now();
            probes += 1;
            if let Ok(Some(link)) = tokio::time::timeout(cfg.interval, prober.probe(pair, attempt)).await {
                return PairResult::Selected {
                    pair: pair.clone(),
                    link,
                    probes,
                };
            }
            tokio::time::sleep_until(started + cfg.interval).await;
        }
    }
    PairResult::Failed { probes }
}

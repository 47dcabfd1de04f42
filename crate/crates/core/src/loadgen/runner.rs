use std::sync::Arc;
use std::time::Duration;

use fake::faker::internet::en::FreeEmail;
use fake::faker::name::en::Name;
use fake::Fake;
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use tokio::time::Instant;

use super::{summarize, window_cv, LoadError, Op, RunStats, Sample, Scenario};
use crate::client::{BrokerClient, ClientError};
use crate::model::{DeviceUuid, MAX_NICKNAME_CHARS};

const SOAK_WINDOW: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Use generated emails as-is, so repeats can collide and be rejected.
    pub allow_collisions: bool,
    /// Seed for synthetic identities; each run derives its own stream.
    pub seed: u64,
    /// Prefix that keeps emails unique across runs against one broker.
    pub tag: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            allow_collisions: false,
            seed: rand::rng().random(),
            tag: format!("{:06x}", rand::rng().random_range(0..0x100_0000u32)),
        }
    }
}

struct Identity {
    nickname: String,
    email: String,
    uuid: DeviceUuid,
}

fn identities(n: usize, run: u64, opts: &LoadOptions) -> Vec<Identity> {
    let mut rng = StdRng::seed_from_u64(opts.seed ^ run.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..n)
        .map(|i| {
            let mut nickname: String = Name().fake_with_rng(&mut rng);
            nickname.truncate(MAX_NICKNAME_CHARS);
            let raw: String = FreeEmail().fake_with_rng(&mut rng);
            let email = if opts.allow_collisions {
                raw
            } else {
                let (local, domain) = raw.split_once('@').unwrap_or((&raw, "example.com"));
                format!("{local}+{}r{run}c{i}@{domain}", opts.tag)
            };
            Identity {
                nickname,
                email,
                uuid: DeviceUuid::from_u128(rng.random()),
            }
        })
        .collect()
}

fn is_fault(e: &ClientError) -> bool {
    !matches!(e, ClientError::Server { .. })
}

fn describe(e: &ClientError) -> String {
    match e.code() {
        Some(code) => code.as_str().to_owned(),
        None => e.to_string(),
    }
}

async fn composite(client: &BrokerClient, op: Op, id: &Identity) -> Result<(), ClientError> {
    client.register(&id.email, &id.nickname, id.uuid).await?;
    if op >= Op::Login {
        client.login(&id.email, id.uuid).await?;
    }
    if op >= Op::FetchPeers {
        client.fetch_peers(false).await?;
    }
    Ok(())
}

/// Clients stay online until the whole run is over, so a fetch sees every
/// peer that arrived before it and is still connected.
async fn virtual_client(
    url: String,
    op: Op,
    id: Identity,
    repeat: usize,
    index: usize,
    start: Instant,
    arrival: Duration,
) -> (Sample, Option<Arc<BrokerClient>>) {
    let mut sample = Sample {
        repeat,
        client: index,
        arrival_ms: arrival.as_secs_f64() * 1000.0,
        latency_ms: 0.0,
        done_ms: 0.0,
        ok: false,
        error: None,
        fault: false,
    };
    let client = match BrokerClient::connect(&url, None).await {
        Ok(c) => c,
        Err(e) => {
            sample.error = Some(describe(&e));
            sample.fault = true;
            sample.done_ms = start.elapsed().as_secs_f64() * 1000.0;
            return (sample, None);
        }
    };
    let t0 = Instant::now();
    let result = composite(&client, op, &id).await;
    let done = Instant::now();
    sample.latency_ms = (done - t0).as_secs_f64() * 1000.0;
    sample.done_ms = (done - start).as_secs_f64() * 1000.0;
    match result {
        Ok(()) => sample.ok = true,
        Err(e) => {
            sample.fault = is_fault(&e);
            sample.error = Some(describe(&e));
        }
    }
    (sample, Some(client))
}

/// One open-loop run: clients start on schedule whatever the broker's pace.
pub async fn run_once(url: &str, op: Op, rate: f64, duration: Duration, repeat: usize, opts: &LoadOptions) -> Result<Vec<Sample>, LoadError> {
    let n = Scenario::new(op, rate, duration).arrivals();
    if n == 0 {
        return Ok(Vec::new());
    }
    // Fail fast when nothing is listening.
    let probe = BrokerClient::connect(url, None)
        .await
        .map_err(|e| LoadError::Connect(e.to_string()))?;
    probe.close();

    let run_id = (repeat as u64) << 32 | (op as u64) << 24 | (rate * 1000.0) as u64 & 0xff_ffff;
    let ids = identities(n, run_id, opts);
    let start = Instant::now();
    let mut handles = Vec::with_capacity(n);
    for (i, id) in ids.into_iter().enumerate() {
        let arrival = Duration::from_secs_f64(i as f64 / rate);
        tokio::time::sleep_until(start + arrival).await;
        handles.push(tokio::spawn(virtual_client(url.to_owned(), op, id, repeat, i, start, arrival)));
    }
    let mut samples = Vec::with_capacity(n);
    let mut online = Vec::with_capacity(n);
    for h in handles {
        let (sample, client) = h.await.expect("virtual client panicked");
        samples.push(sample);
        online.extend(client);
    }
    for c in online {
        let _ = c.disconnect().await;
        c.close();
    }
    Ok(samples)
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    /// Averaged over repeats.
    pub stats: RunStats,
    pub runs: Vec<RunStats>,
    pub samples: Vec<Sample>,
    /// Sliding 10 s window throughput CV for each run.
    pub window_cv: Vec<f64>,
}

/// Run a scenario `repeats` times and average the results.
pub async fn run_scenario(s: &Scenario, url: &str, opts: &LoadOptions) -> Result<ScenarioResult, LoadError> {
    let mut runs = Vec::new();
    let mut samples = Vec::new();
    let mut cvs = Vec::new();
    for r in 0..s.repeats.max(1) {
        let run = run_once(url, s.op, s.rate, s.duration, r, opts).await?;
        runs.push(summarize(s.op, s.rate, s.duration, &run));
        cvs.push(window_cv(&run, s.duration, SOAK_WINDOW, Duration::from_secs(1)));
        samples.extend(run);
    }
    Ok(ScenarioResult {
        stats: RunStats::average(&runs).expect("at least one run"),
        runs,
        samples,
        window_cv: cvs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_are_unique_unless_collisions_allowed() {
        let opts = LoadOptions {
            seed: 7,
            ..Default::default()
        };
        let ids = identities(2000, 1, &opts);
        let emails: std::collections::HashSet<_> = ids.iter().map(|i| i.email.as_str()).collect();
        assert_eq!(emails.len(), 2000);
        assert!(ids.iter().all(|i| crate::model::validate_email(&i.email).is_ok()));
        assert!(ids.iter().all(|i| crate::model::validate_nickname(&i.nickname).is_ok()));
        // Same seed and run give the same people.
        assert_eq!(identities(3, 1, &opts)[2].email, ids[2].email);
    }
}

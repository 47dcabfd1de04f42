use std::time::Duration;

use servicenet::broker::{serve, Broker, BrokerConfig, BrokerServer};
use servicenet::loadgen::{
    run_once, run_scenario, run_suite, summarize, LoadError, LoadOptions, Op, RunStats, Scenario, SuiteConfig, SuiteKind,
};

async fn start(config: BrokerConfig) -> BrokerServer {
    serve(Broker::open(config).unwrap(), "127.0.0.1:0".parse().unwrap())
        .await
        .unwrap()
}

#[tokio::test]
async fn zero_rate_is_empty() {
    let server = start(BrokerConfig::default()).await;
    let s = Scenario::new(Op::FetchPeers, 0.0, Duration::from_secs(10));
    assert_eq!(s.arrivals(), 0);
    let r = run_scenario(&s, &server.url(), &LoadOptions::default()).await.unwrap();
    assert_eq!((r.stats.samples, r.stats.errors), (0, 0));
    assert_eq!(Scenario::new(Op::Register, 300.0, Duration::from_secs(10)).arrivals(), 3000);
}

#[tokio::test]
async fn unreachable_broker_aborts() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("ws://{}/ws", listener.local_addr().unwrap());
    drop(listener);
    let s = Scenario::new(Op::Register, 5.0, Duration::from_secs(1));
    let err = run_scenario(&s, &url, &LoadOptions::default()).await.unwrap_err();
    assert!(matches!(err, LoadError::Connect(_)));
}

#[tokio::test]
async fn repeats_average_the_run_means() {
    let server = start(BrokerConfig::default()).await;
    let mut s = Scenario::new(Op::Login, 20.0, Duration::from_secs(1));
    s.repeats = 3;
    let r = run_scenario(&s, &server.url(), &LoadOptions::default()).await.unwrap();
    assert_eq!(r.samples.len(), 60);
    // Recompute each run from the raw dump.
    let recomputed: Vec<RunStats> = (0..3)
        .map(|rep| {
            let run: Vec<_> = r.samples.iter().filter(|x| x.repeat == rep).cloned().collect();
            summarize(Op::Login, 20.0, s.duration, &run)
        })
        .collect();
    assert_eq!(recomputed, r.runs);
    let mean = recomputed.iter().map(|x| x.mean_ms).sum::<f64>() / 3.0;
    assert!((r.stats.mean_ms - mean).abs() < 1e-9);
    assert_eq!(r.stats.errors, 0);
    assert_eq!(server.broker().registry().len(), 60);
    // LOGIN issues two requests per client.
    assert!(r.stats.throughput_rps <= 2.0 * 20.0 + 1e-9);
}

#[tokio::test]
async fn three_thousand_arrivals_register_three_thousand_peers() {
    let server = start(BrokerConfig::default()).await;
    let samples = run_once(&server.url(), Op::Register, 300.0, Duration::from_secs(10), 0, &LoadOptions::default())
        .await
        .unwrap();
    assert_eq!(samples.len(), 3000);
    assert!(samples.iter().all(|s| s.ok), "{:?}", samples.iter().find(|s| !s.ok));
    assert_eq!(server.broker().registry().len(), 3000);
    let stats = server.broker().pool_stats();
    assert_eq!(stats.acquisitions, 3000);
    assert!(stats.high_water <= stats.capacity);
}

#[tokio::test]
async fn collisions_are_rejected_not_fatal() {
    let server = start(BrokerConfig::default()).await;
    let opts = LoadOptions {
        allow_collisions: true,
        seed: 11,
        ..Default::default()
    };
    let first = run_once(&server.url(), Op::Register, 20.0, Duration::from_secs(1), 0, &opts).await.unwrap();
    assert!(first.iter().all(|s| s.ok));
    // Same seed and run index regenerate the same people.
    let second = run_once(&server.url(), Op::Register, 20.0, Duration::from_secs(1), 0, &opts).await.unwrap();
    assert!(second.iter().all(|s| !s.ok && !s.fault && s.error.as_deref() == Some("ERR_DUPLICATE")));
}

#[tokio::test]
async fn small_suite_orders_composites() {
    let server = start(BrokerConfig {
        pool_cap: 4,
        db_delay: Duration::from_millis(5),
        ..Default::default()
    })
    .await;
    let mut cfg = SuiteConfig::new(SuiteKind::Load, 0.04);
    cfg.duration = Duration::from_secs(1);
    cfg.repeats = 2;
    let mut seen = 0;
    let report = run_suite(&cfg, &server.url(), |_| seen += 1).await.unwrap();
    assert_eq!(report.rows.len(), 15);
    assert_eq!(seen, 15);
    assert_eq!(report.subtracted.len(), 10);
    for rate in SuiteKind::Load.rates(0.04) {
        let get = |op| report.row(op, rate).unwrap().stats.clone();
        let (reg, login, fetch) = (get(Op::Register), get(Op::Login), get(Op::FetchPeers));
        // LOGIN adds a whole query. FETCH only adds a lookup in a map of a
        // handful of peers, which is within scheduler jitter at these sizes.
        assert!(login.mean_ms >= reg.mean_ms, "{reg:?} {login:?}");
        assert!(fetch.mean_ms >= login.mean_ms - 1.0, "{login:?} {fetch:?}");
        assert_eq!(reg.errors + login.errors + fetch.errors, 0);
    }
    assert!(server.broker().pool_stats().high_water <= 4);
}

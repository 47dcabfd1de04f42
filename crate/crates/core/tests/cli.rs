use std::process::{Command, Output, Stdio};
use std::time::Duration;

use serde_json::Value;
use servicenet::broker::{serve, Broker, BrokerConfig, BrokerServer};

const PEER: &str = env!("CARGO_BIN_EXE_servicenet-peer");
const BENCH: &str = env!("CARGO_BIN_EXE_servicenet-bench");
const BROKER: &str = env!("CARGO_BIN_EXE_servicenet-broker");

async fn broker() -> BrokerServer {
    serve(Broker::open(BrokerConfig::default()).unwrap(), "127.0.0.1:0".parse().unwrap())
        .await
        .unwrap()
}

async fn run(bin: &str, args: &[&str]) -> Output {
    let mut cmd = tokio::process::Command::new(bin);
    cmd.args(args).env_remove("SERVICENET_BROKER").env_remove("SERVICENET_STORE");
    tokio::time::timeout(Duration::from_secs(30), cmd.output()).await.expect("command hung").unwrap()
}

fn lines(out: &Output) -> Vec<Value> {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[tokio::test]
async fn peer_cli_posts_and_lists() {
    let server = broker().await;
    let url = server.url();
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("a");
    let store = store.to_str().unwrap();
    let base = ["--broker", url.as_str(), "--store", store, "--location", "-33.86,151.2"];

    let reg = lines(&run(PEER, &[&base[..], &["register", "--email", "a@example.com", "--nickname", "A"]].concat()).await);
    assert_eq!(reg[0]["online"], true);
    let pid = reg[0]["pid"].as_str().unwrap().to_owned();

    let posted = lines(&run(PEER, &[&base[..], &["post-wanted", "--category", "tutoring", "--budget", "25.50 AUD"]].concat()).await);
    let wid = posted[0]["wanted_id"].as_str().unwrap().to_owned();
    let listed = lines(&run(PEER, &[&base[..], &["quotes", &wid]].concat()).await);
    assert!(listed.is_empty());

    // A second registration into the same store is refused.
    let again = run(PEER, &[&base[..], &["register", "--email", "b@example.com", "--nickname", "B"]].concat()).await;
    assert!(!again.status.success());
    let err: Value = serde_json::from_slice(&again.stderr).unwrap();
    assert_eq!(err["error"]["code"], "ERR_STATE");

    let rated = lines(&run(PEER, &[&base[..], &["rate", &pid, "--score", "4"]].concat()).await);
    assert_eq!(rated[0]["score"], 4);
    assert_eq!(server.broker().registry().len(), 1);
}

#[tokio::test]
async fn bench_runs_and_plots() {
    let server = broker().await;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results.csv");
    let o = run(
        BENCH,
        &[
            "run", "--suite", "load", "--broker", &server.url(), "--scale", "0.02", "--duration", "1", "--repeats", "1",
            "--out", out.to_str().unwrap(),
        ],
    )
    .await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next().unwrap(), servicenet::loadgen::CSV_HEADER);
    assert_eq!(csv.lines().count(), 16);
    assert!(dir.path().join("results.samples.csv").exists());

    let figs = dir.path().join("figs");
    let o = run(BENCH, &["plot", out.to_str().unwrap(), "--out", figs.to_str().unwrap()]).await;
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 9);
    assert!(figs.join("fetch_peers_p99.csv").exists());
}

#[test]
fn broker_binary_prints_its_url() {
    let mut child = Command::new(BROKER)
        .args(["--listen", "127.0.0.1:0", "--db-pool-cap", "3"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    std::io::BufRead::read_line(&mut std::io::BufReader::new(child.stdout.take().unwrap()), &mut line).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(line.starts_with("ws://127.0.0.1:") && line.trim_end().ends_with("/ws"), "{line}");

    let bad = Command::new(BROKER).args(["--db-pool-cap", "0"]).output().unwrap();
    assert!(!bad.status.success());
}

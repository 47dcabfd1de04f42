use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use servicenet::broker::{serve, Broker, BrokerConfig, BrokerServer};
use servicenet::client::BrokerClient;
use servicenet::model::{DeviceUuid, MsgId, Pid};
use servicenet::p2p::{CandidateKind, ChatHistory, ChatMessage, P2pAgent, P2pConfig, PeerSession, SessionState};
use servicenet::protocol::ErrorCode;

async fn broker() -> BrokerServer {
    serve(Broker::open(BrokerConfig::default()).unwrap(), "127.0.0.1:0".parse().unwrap())
        .await
        .unwrap()
}

async fn peer(server: &BrokerServer, n: u128, config: P2pConfig) -> Arc<P2pAgent> {
    let client = BrokerClient::connect(&server.url(), None).await.unwrap();
    client
        .register(&format!("peer{n}@x.com"), &format!("Peer{n}"), DeviceUuid::from_u128(n))
        .await
        .unwrap();
    P2pAgent::start(client, config).await.unwrap()
}

async fn pair(a: &Arc<P2pAgent>, b: &Arc<P2pAgent>) -> (Arc<PeerSession>, Arc<PeerSession>) {
    let remote = b.local_pid().clone();
    let (ours, theirs) = tokio::join!(a.connect(&remote), b.accept());
    (ours.unwrap(), theirs.unwrap())
}

async fn exchange_1000(a: &PeerSession, b: &PeerSession) {
    let sender = async {
        for i in 0u32..1000 {
            a.send(&i.to_be_bytes()).await.unwrap();
        }
    };
    let receiver = async {
        for i in 0u32..1000 {
            let got = tokio::time::timeout(Duration::from_secs(10), b.recv()).await.unwrap().unwrap();
            assert_eq!(got, i.to_be_bytes());
        }
    };
    tokio::join!(sender, receiver);
}

#[tokio::test]
async fn loopback_peers_select_the_host_pair() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::default()).await;
    let b = peer(&server, 2, P2pConfig::default()).await;
    let cands = a.gather_candidates();
    assert_eq!(cands.len(), 2);
    assert_eq!(cands[0].kind, CandidateKind::Host);
    assert_eq!(cands[1].kind, CandidateKind::Relay);

    let (sa, sb) = pair(&a, &b).await;
    assert_eq!(sa.state(), SessionState::Connected);
    assert_eq!(sb.state(), SessionState::Connected);
    assert_eq!(sa.id(), sb.id());
    let p = sa.selected_pair().unwrap();
    assert_eq!(p.kind(), CandidateKind::Host);
    assert_eq!(p.priority(), 252);
    assert_eq!(sb.selected_pair().unwrap().kind(), CandidateKind::Host);

    sa.send(b"hi").await.unwrap();
    assert_eq!(sb.recv().await.unwrap(), b"hi");
    sb.send(b"back").await.unwrap();
    assert_eq!(sa.recv().await.unwrap(), b"back");
    exchange_1000(&sa, &sb).await;

    sa.close().await;
    let err = sa.send(b"late").await.unwrap_err();
    assert_eq!(err.code(), ErrorCode::State);
    let mut st = sb.watch_state();
    tokio::time::timeout(Duration::from_secs(2), st.wait_for(|s| *s == SessionState::Closed))
        .await
        .unwrap()
        .unwrap();
    assert!(sb.selected_pair().is_none());
}

#[tokio::test]
async fn blocked_host_path_falls_back_to_relay() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::default()).await;
    let b = peer(&server, 2, P2pConfig::default()).await;
    a.filter().set_block_host(true);
    b.filter().set_block_host(true);
    let (sa, sb) = pair(&a, &b).await;
    assert_eq!(sa.selected_pair().unwrap().kind(), CandidateKind::Relay);
    assert_eq!(sb.selected_pair().unwrap().kind(), CandidateKind::Relay);
    exchange_1000(&sa, &sb).await;
    exchange_1000(&sb, &sa).await;
}

#[tokio::test]
async fn relay_only_config() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::relay_only()).await;
    let b = peer(&server, 2, P2pConfig::relay_only()).await;
    let cands = a.gather_candidates();
    assert_eq!(cands.len(), 1);
    assert_eq!(cands[0].kind, CandidateKind::Relay);
    let (sa, sb) = pair(&a, &b).await;
    assert_eq!(sa.selected_pair().unwrap().kind(), CandidateKind::Relay);
    sa.send(b"via broker").await.unwrap();
    assert_eq!(sb.recv().await.unwrap(), b"via broker");
}

#[tokio::test]
async fn two_interfaces_give_two_host_candidates() {
    let server = broker().await;
    let two = P2pConfig {
        interfaces: vec![IpAddr::V4(Ipv4Addr::new(127, 0, 0, 1)), IpAddr::V4(Ipv4Addr::new(127, 0, 0, 2))],
        ..Default::default()
    };
    let a = peer(&server, 1, two.clone()).await;
    let b = peer(&server, 2, two).await;
    let cands = a.gather_candidates();
    let hosts: Vec<_> = cands.iter().filter(|c| c.kind == CandidateKind::Host).collect();
    assert_eq!(hosts.len(), 2);
    assert_eq!(hosts[0].priority, hosts[1].priority);
    assert_eq!(cands.len(), 3);

    // With 127.0.0.1 blocked the next host pair still wins over relay.
    a.filter().block_ip("127.0.0.1".parse().unwrap());
    let (sa, _sb) = pair(&a, &b).await;
    let p = sa.selected_pair().unwrap();
    assert_eq!(p.kind(), CandidateKind::Host);
    assert!(p.local.address.starts_with("127.0.0.2"));
    assert!(p.remote.address.starts_with("127.0.0.2"));
}

#[tokio::test]
async fn offline_remote() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::default()).await;
    let err = a.connect(&"ZZZZZZ".parse::<Pid>().unwrap()).await.unwrap_err();
    assert_eq!(err.code(), ErrorCode::Offline);
}

#[tokio::test]
async fn silent_remote_times_out_after_ten_seconds() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::default()).await;
    // Logged in, but nothing answers signaling.
    let mute = BrokerClient::connect(&server.url(), None).await.unwrap();
    let pid = mute.register("mute@x.com", "Mute", DeviceUuid::from_u128(9)).await.unwrap().pid;
    let start = Instant::now();
    let err = a.connect(&pid).await.unwrap_err();
    let took = start.elapsed();
    assert_eq!(err.code(), ErrorCode::Timeout);
    assert!(took >= Duration::from_secs(9) && took <= Duration::from_secs(11), "{took:?}");
}

#[tokio::test]
async fn every_pair_blocked_is_unreachable() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::default()).await;
    let b = peer(&server, 2, P2pConfig::default()).await;
    a.filter().set_block_host(true);
    a.filter().set_block_relay(true);
    let start = Instant::now();
    let err = a.connect(b.local_pid()).await.unwrap_err();
    assert_eq!(err.code(), ErrorCode::Unreachable);
    // Two pairs, three probes each, 500 ms apart.
    assert!(start.elapsed() <= Duration::from_millis(3000 + 1000));
}

#[tokio::test]
async fn glare_resolves_to_one_session() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::default()).await;
    let b = peer(&server, 2, P2pConfig::default()).await;
    let (pa, pb) = (a.local_pid().clone(), b.local_pid().clone());
    let (ra, rb) = tokio::join!(a.connect(&pb), b.connect(&pa));
    let (sa, sb) = (ra.unwrap(), rb.unwrap());
    assert_eq!(sa.id(), sb.id());
    assert_eq!(sa.state(), SessionState::Connected);
    sa.send(b"x").await.unwrap();
    assert_eq!(sb.recv().await.unwrap(), b"x");
}

#[tokio::test]
async fn broken_channel_fails_the_session() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::default()).await;
    let b = peer(&server, 2, P2pConfig::default()).await;
    let (sa, sb) = pair(&a, &b).await;
    sb.sever().await;
    let mut st = sa.watch_state();
    tokio::time::timeout(Duration::from_secs(2), st.wait_for(|s| *s == SessionState::Failed))
        .await
        .unwrap()
        .unwrap();
    assert_eq!(sa.send(b"x").await.unwrap_err().code(), ErrorCode::State);
    assert!(sa.selected_pair().is_none());
    sa.close().await;
    assert_eq!(sa.state(), SessionState::Closed);
}

fn pid(n: usize) -> Pid {
    ["AAAAAA", "BBBBBB", "CCCCCC"][n % 3].parse().unwrap()
}

fn message(i: usize, rng: &mut StdRng) -> ChatMessage {
    ChatMessage {
        msg_id: MsgId::from_u128(rng.random()),
        author: pid(i),
        body: format!("line {i}"),
        lamport: rng.random_range(1..50),
        wall_time: Utc.timestamp_opt(1_590_537_600 + i as i64, 0).unwrap(),
    }
}

#[tokio::test]
async fn chat_sync_cases() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::default()).await;
    let b = peer(&server, 2, P2pConfig::default()).await;
    let (sa, sb) = pair(&a, &b).await;
    let mut rng = StdRng::seed_from_u64(7);

    // Disjoint histories converge to the union.
    let m1 = message(0, &mut rng);
    let m2 = message(1, &mut rng);
    sb.load_chat(&ChatHistory::from_messages([m2.clone()]));
    let report = sa.sync_chat(&ChatHistory::from_messages([m1.clone()])).await.unwrap();
    assert_eq!(report.history.len(), 2);
    assert_eq!(sb.chat().ordered(), report.history);

    // Identical histories exchange digests only.
    let again = sa.sync_chat(&ChatHistory::new()).await.unwrap();
    assert_eq!(again.records_sent, 0);
    assert_eq!(again.records_received, 0);
    assert_eq!(again.digests_sent, 2);
    assert_eq!(again.history, report.history);

    // Malformed records are skipped and counted.
    let good = serde_json::to_value(message(2, &mut rng)).unwrap();
    let body = serde_json::to_vec(&serde_json::json!([good, {"msg_id": 1}])).unwrap();
    sa.send_raw_records(&body).await.unwrap();
    let report = sb.sync_chat(&ChatHistory::new()).await.unwrap();
    assert_eq!(sb.stats().records_skipped.load(std::sync::atomic::Ordering::Relaxed), 1);
    assert_eq!(report.history.len(), 3);
    assert_eq!(sa.chat().ordered(), report.history);
}

#[tokio::test]
async fn chat_sync_matches_union_oracle_on_random_partitions() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::default()).await;
    let b = peer(&server, 2, P2pConfig::default()).await;
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..5 {
        let (sa, sb) = pair(&a, &b).await;
        let all: Vec<ChatMessage> = (0..200).map(|i| message(i, &mut rng)).collect();
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for m in &all {
            match rng.random_range(0..3) {
                0 => left.push(m.clone()),
                1 => right.push(m.clone()),
                _ => {
                    left.push(m.clone());
                    right.push(m.clone());
                }
            }
        }
        sb.load_chat(&ChatHistory::from_messages(right));
        let report = sa.sync_chat(&ChatHistory::from_messages(left)).await.unwrap();

        let mut oracle: BTreeMap<(u64, String, MsgId), ChatMessage> = BTreeMap::new();
        for m in &all {
            oracle.insert((m.lamport, m.author.to_string(), m.msg_id), m.clone());
        }
        let expected: Vec<ChatMessage> = oracle.into_values().collect();
        assert_eq!(report.history, expected);
        assert_eq!(sb.chat().ordered(), expected);
        sa.close().await;
    }
}

#[tokio::test]
async fn live_chat_lines_arrive_as_events() {
    let server = broker().await;
    let a = peer(&server, 1, P2pConfig::default()).await;
    let b = peer(&server, 2, P2pConfig::default()).await;
    let (sa, sb) = pair(&a, &b).await;
    let mut events = sb.take_chat_events().unwrap();
    let sent = sa.send_chat("hello").await.unwrap();
    let got = events.recv().await.unwrap();
    assert_eq!(got, sent);
    assert_eq!(got.author, *a.local_pid());
}

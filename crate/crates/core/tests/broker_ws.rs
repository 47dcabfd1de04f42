use std::sync::Arc;
use std::time::Duration;

use servicenet::broker::{serve, Broker, BrokerConfig, BrokerServer};
use servicenet::client::{BrokerClient, LinkStatus, PeerEvent};
use servicenet::model::DeviceUuid;
use servicenet::protocol::ErrorCode;
use servicenet::pubsub::{AttrValue, Attrs};

async fn start(config: BrokerConfig) -> BrokerServer {
    let broker = Broker::open(config).unwrap();
    serve(broker, "127.0.0.1:0".parse().unwrap()).await.unwrap()
}

fn uuid(n: u128) -> DeviceUuid {
    DeviceUuid::from_u128(n)
}

fn kind(k: &str) -> Attrs {
    let mut a = Attrs::new();
    a.insert("kind".into(), AttrValue::Str(k.into()));
    a
}

#[tokio::test]
async fn register_login_fetch_over_websocket() {
    let server = start(BrokerConfig::default()).await;
    let a = BrokerClient::connect(&server.url(), None).await.unwrap();
    let reg = a.register("alice@x.com", "Alice", uuid(1)).await.unwrap();

    let dup = BrokerClient::connect(&server.url(), None).await.unwrap();
    let err = dup.register("alice@x.com", "Other", uuid(2)).await.unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::Duplicate));
    // The broker keeps serving the same connection after an error.
    dup.register("other@x.com", "Other", uuid(2)).await.unwrap();

    let peers = a.fetch_peers(false).await.unwrap();
    assert_eq!(peers.len(), 2);
    assert!(peers.iter().any(|p| p.pid == reg.pid));

    let again = a.login(reg.pid.as_str(), uuid(1)).await.unwrap();
    assert_ne!(again.tid, reg.tid);
    assert_eq!(a.login("alice@x.com", uuid(7)).await.unwrap_err().code(), Some(ErrorCode::Device));
}

#[tokio::test]
async fn bad_frames_get_structured_errors() {
    let server = start(BrokerConfig::default()).await;
    let c = BrokerClient::connect(&server.url(), None).await.unwrap();
    c.send_raw(r#"{"type":"BOGUS","seq":99}"#).unwrap();
    c.send_raw("not even json").unwrap();
    // Unauthenticated request.
    assert_eq!(c.fetch_peers(false).await.unwrap_err().code(), Some(ErrorCode::Session));
    c.ping().await.unwrap();
    c.register("a@x.com", "A", uuid(1)).await.unwrap();
    assert_eq!(server.broker().session_count(), 1);
}

#[tokio::test]
async fn relogin_elsewhere_evicts() {
    let server = start(BrokerConfig::default()).await;
    let first = BrokerClient::connect(&server.url(), None).await.unwrap();
    first.register("a@x.com", "A", uuid(1)).await.unwrap();
    let mut status = first.status();
    let second = BrokerClient::connect(&server.url(), None).await.unwrap();
    second.login("a@x.com", uuid(1)).await.unwrap();
    tokio::time::timeout(Duration::from_secs(2), status.wait_for(|s| *s != LinkStatus::Open))
        .await
        .unwrap()
        .unwrap();
    assert_eq!(*status.borrow(), LinkStatus::Evicted);
    assert_eq!(server.broker().session_count(), 1);
}

#[tokio::test]
async fn silent_sessions_are_reaped() {
    let server = start(BrokerConfig {
        heartbeat: Duration::from_millis(100),
        ..Default::default()
    })
    .await;
    let silent = BrokerClient::connect(&server.url(), None).await.unwrap();
    silent.register("s@x.com", "S", uuid(1)).await.unwrap();
    let alive = BrokerClient::connect(&server.url(), Some(Duration::from_millis(100))).await.unwrap();
    alive.register("l@x.com", "L", uuid(2)).await.unwrap();
    tokio::time::sleep(Duration::from_millis(600)).await;
    assert_eq!(server.broker().session_count(), 1);
    assert_eq!(alive.fetch_peers(false).await.unwrap().len(), 1);
}

#[tokio::test]
async fn signal_relay_preserves_order_and_reports_offline() {
    let server = start(BrokerConfig::default()).await;
    let a = BrokerClient::connect(&server.url(), None).await.unwrap();
    let b = BrokerClient::connect(&server.url(), None).await.unwrap();
    let pa = a.register("a@x.com", "A", uuid(1)).await.unwrap().pid;
    let pb = b.register("b@x.com", "B", uuid(2)).await.unwrap().pid;
    let mut events = b.take_events().unwrap();
    let payload = serde_json::json!({"zeta": 1, "alpha": [1, 2], "phase": "OFFER"});
    a.signal(&pb, payload.clone()).await.unwrap();
    match events.recv().await.unwrap() {
        PeerEvent::Signal { from, payload: got } => {
            assert_eq!(from, pa);
            assert_eq!(serde_json::to_string(&got).unwrap(), serde_json::to_string(&payload).unwrap());
        }
        other => panic!("{other:?}"),
    }

    b.disconnect().await.unwrap();
    b.disconnect().await.unwrap();
    let err = a.signal(&pb, serde_json::json!({})).await.unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::Offline));
}

#[tokio::test]
async fn disconnect_mid_relay_never_acks_a_drop() {
    // Each relay either reaches the target or comes back ERR_OFFLINE.
    let server = start(BrokerConfig::default()).await;
    let a = BrokerClient::connect(&server.url(), None).await.unwrap();
    let b = BrokerClient::connect(&server.url(), None).await.unwrap();
    a.register("a@x.com", "A", uuid(1)).await.unwrap();
    let pb = b.register("b@x.com", "B", uuid(2)).await.unwrap().pid;
    let mut events = b.take_events().unwrap();

    let sender = {
        let a = a.clone();
        let pb = pb.clone();
        tokio::spawn(async move {
            let mut acked = Vec::new();
            for i in 0u32..400 {
                match a.relay(&pb, "s", &i.to_be_bytes()).await {
                    Ok(()) => acked.push(i),
                    Err(e) => assert_eq!(e.code(), Some(ErrorCode::Offline)),
                }
            }
            acked
        })
    };
    tokio::time::sleep(Duration::from_millis(20)).await;
    b.disconnect().await.unwrap();
    let acked = sender.await.unwrap();

    let mut received = Vec::new();
    while let Ok(Some(PeerEvent::Relay { data, .. })) = tokio::time::timeout(Duration::from_millis(200), events.recv()).await {
        received.push(u32::from_be_bytes(data.try_into().unwrap()));
    }
    assert_eq!(received, acked);
}

#[tokio::test]
async fn pubsub_over_websocket() {
    let server = start(BrokerConfig::default()).await;
    let sub = BrokerClient::connect(&server.url(), None).await.unwrap();
    let publ = BrokerClient::connect(&server.url(), None).await.unwrap();
    sub.register("s@x.com", "S", uuid(1)).await.unwrap();
    publ.register("p@x.com", "P", uuid(2)).await.unwrap();

    let (_, mut early) = sub.subscribe("svc.request.*").await.unwrap();
    let (sid2, mut all) = sub.subscribe("svc.>").await.unwrap();
    assert_eq!(publ.publish("svc.request.plumbing", kind("wanted"), b"x").await.unwrap(), 2);
    assert_eq!(publ.publish("svc.quote.abc", kind("quote"), b"y").await.unwrap(), 1);
    assert_eq!(early.recv().await.unwrap().payload, b"x");
    assert_eq!(all.recv().await.unwrap().subject.as_str(), "svc.request.plumbing");
    assert_eq!(all.recv().await.unwrap().subject.as_str(), "svc.quote.abc");

    sub.unsubscribe(sid2).await.unwrap();
    assert_eq!(sub.unsubscribe(sid2).await.unwrap_err().code(), Some(ErrorCode::Sid));
    assert_eq!(publ.publish("svc.request.x", kind("wanted"), b"").await.unwrap(), 1);

    let big = vec![0u8; 64 * 1024 + 1];
    let err = publ.publish("svc.request.x", kind("wanted"), &big).await.unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::Size));
    let err = sub.subscribe("svc.>.x").await.unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::Pattern));

    let frame = servicenet::protocol::ClientFrame::Pub {
        seq: None,
        subject: "svc.request.x".into(),
        attrs: kind("wanted"),
        payload_b64: String::new(),
        id: None,
        sender: Some("ZZZZZZ".into()),
    };
    assert_eq!(publ.publish_frame(frame).await.unwrap_err().code(), Some(ErrorCode::Sender));

    // Closing the socket removes the session and its subscriptions.
    drop(early);
    sub.close();
    let broker: &Arc<Broker> = server.broker();
    tokio::time::timeout(Duration::from_secs(2), async {
        while broker.router().subscription_count() != 0 {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    })
    .await
    .unwrap();
}

#[tokio::test]
async fn wrong_path_is_rejected() {
    let server = start(BrokerConfig::default()).await;
    let url = format!("ws://{}/nope", server.local_addr());
    assert!(BrokerClient::connect(&url, None).await.is_err());
}

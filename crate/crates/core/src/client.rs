//! Async client for the broker's `/ws` endpoint.
//!
//! Requests are matched to replies by `seq`. Pub/sub deliveries are fanned
//! out per subscription; signaling and relay traffic go to a single
//! [`PeerEvent`] stream consumed by the P2P agent.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use futures_util::{SinkExt, StreamExt};
use parking_lot::Mutex;
use serde_json::Value;
use tokio::sync::{mpsc, oneshot, watch};
use tokio_tungstenite::tungstenite::Message;

use crate::broker::LoginOutcome;
use crate::model::{DeviceUuid, Pid, Tid};
use crate::protocol::{ClientFrame, ErrorCode, PeerInfo, ServerFrame};
use crate::pubsub::{Attrs, Envelope, Sid};

/// Deliveries buffered for a sid whose SUBSCRIBED reply has not been seen.
const ORPHAN_LIMIT: usize = 1024;

#[derive(Debug, Clone, thiserror::Error)]
pub enum ClientError {
    #[error("cannot connect to broker: {0}")]
    Connect(String),
    #[error("broker connection closed")]
    Closed,
    #[error("{code}: {detail}")]
    Server { code: ErrorCode, detail: String },
    #[error("unexpected reply: {0}")]
    Unexpected(String),
}

impl ClientError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Server { code, .. } => Some(*code),
            _ => None,
        }
    }
}

/// Peer-directed traffic relayed by the broker.
#[derive(Debug, Clone, PartialEq)]
pub enum PeerEvent {
    Signal { from: Pid, payload: Value },
    Relay { from: Pid, session: String, data: Vec<u8> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkStatus {
    Open,
    /// Another connection logged in as the same PID.
    Evicted,
    Closed,
}

struct Reply {
    frame: ServerFrame,
    deliveries: Option<mpsc::UnboundedReceiver<Envelope>>,
}

#[derive(Default)]
struct Shared {
    pending: HashMap<u64, oneshot::Sender<Reply>>,
    subs: HashMap<Sid, mpsc::UnboundedSender<Envelope>>,
    orphans: HashMap<Sid, Vec<Envelope>>,
    session: Option<LoginOutcome>,
    closed: bool,
}

pub struct BrokerClient {
    url: String,
    out: mpsc::UnboundedSender<Message>,
    next_seq: AtomicU64,
    shared: Arc<Mutex<Shared>>,
    status: watch::Receiver<LinkStatus>,
    events: Mutex<Option<mpsc::UnboundedReceiver<PeerEvent>>>,
}

impl BrokerClient {
    /// Connect and start the reader, writer and (optional) ping tasks.
    pub async fn connect(url: &str, heartbeat: Option<Duration>) -> Result<Arc<Self>, ClientError> {
        let (ws, _) = tokio_tungstenite::connect_async(url)
            .await
            .map_err(|e| ClientError::Connect(e.to_string()))?;
        let (mut sink, mut source) = ws.split();
        let (out, mut out_rx) = mpsc::unbounded_channel::<Message>();
        let (status_tx, status) = watch::channel(LinkStatus::Open);
        let (event_tx, events) = mpsc::unbounded_channel();
        let shared = Arc::new(Mutex::new(Shared::default()));

        tokio::spawn(async move {
            while let Some(m) = out_rx.recv().await {
                if sink.send(m).await.is_err() {
                    break;
                }
            }
            let _ = sink.close().await;
        });

        let reader_shared = shared.clone();
        tokio::spawn(async move {
            while let Some(Ok(msg)) = source.next().await {
                let text = match msg {
                    Message::Text(t) => t,
                    Message::Close(_) => break,
                    _ => continue,
                };
                let Ok(frame) = serde_json::from_str::<ServerFrame>(text.as_str()) else {
                    tracing::warn!("unparseable frame from broker");
                    continue;
                };
                route(&reader_shared, &event_tx, &status_tx, frame);
            }
            let mut s = reader_shared.lock();
            s.closed = true;
            s.pending.clear();
            s.subs.clear();
            drop(s);
            status_tx.send_if_modified(|st| {
                if *st == LinkStatus::Open {
                    *st = LinkStatus::Closed;
                    true
                } else {
                    false
                }
            });
        });

        if let Some(every) = heartbeat {
            let ping = out.clone();
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(every);
                tick.tick().await;
                loop {
                    tick.tick().await;
                    let text = serde_json::to_string(&ClientFrame::Ping { seq: None }).unwrap();
                    if ping.send(Message::text(text)).is_err() {
                        break;
                    }
                }
            });
        }

        Ok(Arc::new(BrokerClient {
            url: url.to_owned(),
            out,
            next_seq: AtomicU64::new(1),
            shared,
            status,
            events: Mutex::new(Some(events)),
        }))
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Host and port of the broker, used as the relay candidate address.
    pub fn broker_addr(&self) -> String {
        let rest = self.url.split("://").nth(1).unwrap_or(&self.url);
        rest.split('/').next().unwrap_or(rest).to_owned()
    }

    /// The signaling/relay stream. Can be taken once.
    pub fn take_events(&self) -> Option<mpsc::UnboundedReceiver<PeerEvent>> {
        self.events.lock().take()
    }

    pub fn status(&self) -> watch::Receiver<LinkStatus> {
        self.status.clone()
    }

    pub fn session(&self) -> Option<LoginOutcome> {
        self.shared.lock().session.clone()
    }

    pub fn pid(&self) -> Option<Pid> {
        self.session().map(|s| s.pid)
    }

    async fn call(&self, frame: ClientFrame) -> Result<Reply, ClientError> {
        let seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel();
        {
            let mut s = self.shared.lock();
            if s.closed {
                return Err(ClientError::Closed);
            }
            s.pending.insert(seq, tx);
        }
        let text = serde_json::to_string(&frame.with_seq(seq)).expect("client frames serialize");
        if self.out.send(Message::text(text)).is_err() {
            self.shared.lock().pending.remove(&seq);
            return Err(ClientError::Closed);
        }
        let reply = rx.await.map_err(|_| ClientError::Closed)?;
        if let ServerFrame::Error { code, detail, .. } = reply.frame {
            return Err(ClientError::Server { code, detail });
        }
        Ok(reply)
    }

    /// Send one frame and wait for its reply (error frames become `Err`).
    pub async fn request(&self, frame: ClientFrame) -> Result<ServerFrame, ClientError> {
        Ok(self.call(frame).await?.frame)
    }

    /// Send a raw text frame without waiting for anything.
    pub fn send_raw(&self, text: &str) -> Result<(), ClientError> {
        self.out.send(Message::text(text.to_owned())).map_err(|_| ClientError::Closed)
    }

    fn remember(&self, pid: Pid, tid: Tid) -> LoginOutcome {
        let out = LoginOutcome { pid, tid };
        self.shared.lock().session = Some(out.clone());
        out
    }

    pub async fn register(&self, email: &str, nickname: &str, uuid: DeviceUuid) -> Result<LoginOutcome, ClientError> {
        let frame = ClientFrame::Register {
            seq: None,
            email: email.to_owned(),
            nickname: nickname.to_owned(),
            uuid: uuid.to_string(),
        };
        match self.request(frame).await? {
            ServerFrame::Registered { pid, tid, .. } => Ok(self.remember(pid, tid)),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    pub async fn login(&self, credential: &str, uuid: DeviceUuid) -> Result<LoginOutcome, ClientError> {
        let frame = ClientFrame::Login {
            seq: None,
            credential: credential.to_owned(),
            uuid: uuid.to_string(),
        };
        match self.request(frame).await? {
            ServerFrame::LoggedIn { pid, tid, .. } => Ok(self.remember(pid, tid)),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    pub async fn fetch_peers(&self, include_offline: bool) -> Result<Vec<PeerInfo>, ClientError> {
        let tid = self.session().map(|s| s.tid.to_string());
        match self
            .request(ClientFrame::FetchPeers {
                seq: None,
                tid,
                include_offline,
            })
            .await?
        {
            ServerFrame::Peers { peers, .. } => Ok(peers),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    pub async fn signal(&self, to: &Pid, payload: Value) -> Result<(), ClientError> {
        self.request(ClientFrame::Signal {
            seq: None,
            to: to.to_string(),
            payload,
        })
        .await
        .map(drop)
    }

    pub async fn relay(&self, to: &Pid, session: &str, data: &[u8]) -> Result<(), ClientError> {
        self.request(ClientFrame::Relay {
            seq: None,
            to: to.to_string(),
            session: session.to_owned(),
            data: B64.encode(data),
        })
        .await
        .map(drop)
    }

    /// Subscribe; deliveries for the new sid arrive on the returned channel.
    pub async fn subscribe(&self, pattern: &str) -> Result<(Sid, mpsc::UnboundedReceiver<Envelope>), ClientError> {
        let reply = self
            .call(ClientFrame::Sub {
                seq: None,
                pattern: pattern.to_owned(),
            })
            .await?;
        match (reply.frame, reply.deliveries) {
            (ServerFrame::Subscribed { sid, .. }, Some(rx)) => Ok((sid, rx)),
            (other, _) => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    pub async fn unsubscribe(&self, sid: Sid) -> Result<(), ClientError> {
        self.request(ClientFrame::Unsub { seq: None, sid }).await?;
        let mut s = self.shared.lock();
        s.subs.remove(&sid);
        s.orphans.remove(&sid);
        Ok(())
    }

    pub async fn publish(&self, subject: &str, attrs: Attrs, payload: &[u8]) -> Result<usize, ClientError> {
        self.publish_frame(ClientFrame::Pub {
            seq: None,
            subject: subject.to_owned(),
            attrs,
            payload_b64: B64.encode(payload),
            id: None,
            sender: None,
        })
        .await
    }

    pub async fn publish_frame(&self, frame: ClientFrame) -> Result<usize, ClientError> {
        match self.request(frame).await? {
            ServerFrame::Published { delivered, .. } => Ok(delivered),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    pub async fn ping(&self) -> Result<(), ClientError> {
        self.request(ClientFrame::Ping { seq: None }).await.map(drop)
    }

    /// End the session but keep the socket.
    pub async fn disconnect(&self) -> Result<(), ClientError> {
        self.request(ClientFrame::Disconnect { seq: None }).await?;
        self.shared.lock().session = None;
        Ok(())
    }

    /// Close the socket.
    pub fn close(&self) {
        let _ = self.out.send(Message::Close(None));
    }
}

impl Drop for BrokerClient {
    fn drop(&mut self) {
        self.close();
    }
}

fn route(
    shared: &Mutex<Shared>,
    events: &mpsc::UnboundedSender<PeerEvent>,
    status: &watch::Sender<LinkStatus>,
    frame: ServerFrame,
) {
    match frame {
        ServerFrame::Msg { sid, envelope } => {
            let mut s = shared.lock();
            match s.subs.get(&sid) {
                Some(tx) => {
                    let _ = tx.send(envelope);
                }
                None => {
                    let buf = s.orphans.entry(sid).or_default();
                    if buf.len() < ORPHAN_LIMIT {
                        buf.push(envelope);
                    }
                }
            }
        }
        ServerFrame::Signal { from, payload } => {
            let _ = events.send(PeerEvent::Signal { from, payload });
        }
        ServerFrame::Relay { from, session, data } => match B64.decode(data.as_bytes()) {
            Ok(data) => {
                let _ = events.send(PeerEvent::Relay { from, session, data });
            }
            Err(_) => tracing::warn!("dropping relay frame with invalid base64 from {from}"),
        },
        ServerFrame::Error {
            code: ErrorCode::Evicted,
            seq: None,
            ..
        } => {
            shared.lock().session = None;
            let _ = status.send(LinkStatus::Evicted);
        }
        other => {
            let Some(seq) = other.reply_seq() else {
                if let ServerFrame::Error { code, detail, .. } = &other {
                    tracing::warn!("broker error without seq: {code}: {detail}");
                }
                return;
            };
            let mut s = shared.lock();
            let Some(tx) = s.pending.remove(&seq) else {
                return;
            };
            let deliveries = if let ServerFrame::Subscribed { sid, .. } = &other {
                let (dtx, drx) = mpsc::unbounded_channel();
                for env in s.orphans.remove(sid).unwrap_or_default() {
                    let _ = dtx.send(env);
                }
                s.subs.insert(*sid, dtx);
                Some(drx)
            } else {
                None
            };
            if matches!(other, ServerFrame::Bye { .. }) {
                s.session = None;
            }
            let _ = tx.send(Reply {
                frame: other,
                deliveries,
            });
        }
    }
}

//! Rendezvous broker: registration, login, live session map, peer
//! directory, signaling relay and the in-process subject router.
//!
//! The broker stores identity only (PID, nickname, email, device token).
//! Everything else lives on the peers; the broker just moves messages.

mod pool;
mod registry;
pub(crate) use registry::inspect_schema;
mod server;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rusqlite::Connection;
use serde_json::Value;
use tokio::sync::mpsc;

pub use pool::{DbError, DbPool, PoolStats};
pub use registry::{normalize_email, Registry, RegistryError, RegistryRecord};
pub use server::{serve, BrokerServer};

use crate::model::{mint_pid, mint_tid, validate_email, validate_nickname, DeviceUuid, ModelError, Pid, Tid};
use crate::protocol::{ErrorCode, PeerInfo, ServerFrame};
use crate::pubsub::{DeliverySink, Envelope, Router, RouterError, Sid};

pub const DEFAULT_POOL_CAP: usize = 500;
pub const DEFAULT_HEARTBEAT: Duration = Duration::from_secs(15);
pub const MAX_PEER_LIST: usize = 50_000;

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// `None` keeps the registry in memory.
    pub db_path: Option<PathBuf>,
    pub pool_cap: usize,
    pub db_delay: Duration,
    /// Client ping interval; sessions silent for three intervals are reaped.
    pub heartbeat: Duration,
    pub max_peer_list: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            db_path: None,
            pool_cap: DEFAULT_POOL_CAP,
            db_delay: Duration::ZERO,
            heartbeat: DEFAULT_HEARTBEAT,
            max_peer_list: MAX_PEER_LIST,
        }
    }
}

impl BrokerConfig {
    pub fn reap_after(&self) -> Duration {
        self.heartbeat * 3
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("email already registered")]
    Duplicate,
    #[error("unknown credential")]
    Unknown,
    #[error("device does not match the registered device")]
    Device,
    #[error("no live session")]
    Session,
    #[error("peer {0} is offline")]
    Offline(Pid),
    #[error("peer list exceeds {0} entries")]
    TooLarge(usize),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Db(#[from] DbError),
}

impl From<ModelError> for BrokerError {
    fn from(e: ModelError) -> Self {
        BrokerError::Validation(e.to_string())
    }
}

impl BrokerError {
    pub fn code(&self) -> ErrorCode {
        match self {
            BrokerError::Duplicate => ErrorCode::Duplicate,
            BrokerError::Unknown => ErrorCode::Unknown,
            BrokerError::Device => ErrorCode::Device,
            BrokerError::Session => ErrorCode::Session,
            BrokerError::Offline(_) => ErrorCode::Offline,
            BrokerError::TooLarge(_) => ErrorCode::TooLarge,
            BrokerError::Validation(_) => ErrorCode::Validation,
            BrokerError::Router(r) => match r {
                RouterError::UnknownSession => ErrorCode::Session,
                RouterError::Pattern(_) => ErrorCode::Pattern,
                RouterError::UnknownSid(_) => ErrorCode::Sid,
                RouterError::Size(_) => ErrorCode::Size,
                RouterError::Sender { .. } => ErrorCode::Sender,
                RouterError::Envelope(_) => ErrorCode::Validation,
            },
            BrokerError::Db(_) => ErrorCode::Internal,
        }
    }

    pub fn to_frame(&self, seq: Option<u64>) -> ServerFrame {
        ServerFrame::error(self.code(), seq, self.to_string())
    }
}

/// What the connection writer should do next.
#[derive(Debug)]
pub enum Outbound {
    Frame(ServerFrame),
    Close,
}

/// Sending half of one client channel.
#[derive(Debug, Clone)]
pub struct ConnHandle {
    id: u64,
    tx: mpsc::UnboundedSender<Outbound>,
}

static NEXT_CONN: AtomicU64 = AtomicU64::new(1);

impl ConnHandle {
    pub fn new() -> (Self, mpsc::UnboundedReceiver<Outbound>) {
        let (tx, rx) = mpsc::unbounded_channel();
        (
            ConnHandle {
                id: NEXT_CONN.fetch_add(1, Ordering::Relaxed),
                tx,
            },
            rx,
        )
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn send(&self, frame: ServerFrame) -> bool {
        self.tx.send(Outbound::Frame(frame)).is_ok()
    }

    pub fn close(&self) {
        let _ = self.tx.send(Outbound::Close);
    }
}

struct ConnSink(ConnHandle);

impl DeliverySink for ConnSink {
    fn deliver(&self, sid: Sid, envelope: &Arc<Envelope>) -> bool {
        self.0.send(ServerFrame::Msg {
            sid,
            envelope: (**envelope).clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SessionEntry {
    pub pid: Pid,
    pub tid: Tid,
    pub conn: ConnHandle,
    pub connected_at: DateTime<Utc>,
}

#[derive(Default)]
struct SessionTable {
    by_pid: HashMap<Pid, SessionEntry>,
    by_tid: HashMap<Tid, Pid>,
    by_conn: HashMap<u64, Tid>,
}

impl SessionTable {
    fn remove_tid(&mut self, tid: &Tid) -> Option<SessionEntry> {
        let pid = self.by_tid.remove(tid)?;
        let entry = self.by_pid.remove(&pid)?;
        if self.by_conn.get(&entry.conn.id) == Some(tid) {
            self.by_conn.remove(&entry.conn.id);
        }
        Some(entry)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoginOutcome {
    pub pid: Pid,
    pub tid: Tid,
}

pub struct Broker {
    config: BrokerConfig,
    registry: Registry,
    sessions: RwLock<SessionTable>,
    router: Router,
    rng: Mutex<StdRng>,
}

impl Broker {
    pub fn open(config: BrokerConfig) -> Result<Arc<Self>, BrokerError> {
        let conn = match &config.db_path {
            Some(p) => Connection::open(p).map_err(DbError::from)?,
            None => Connection::open_in_memory().map_err(DbError::from)?,
        };
        conn.execute_batch("PRAGMA journal_mode=WAL; PRAGMA synchronous=NORMAL;")
            .map_err(DbError::from)?;
        let pool = DbPool::new(conn, config.pool_cap, config.db_delay);
        let registry = Registry::open(pool)?;
        Ok(Arc::new(Broker {
            config,
            registry,
            sessions: RwLock::new(SessionTable::default()),
            router: Router::new(),
            rng: Mutex::new(StdRng::from_rng(&mut rand::rng())),
        }))
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.registry.pool().stats()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().by_pid.len()
    }

    pub fn is_online(&self, pid: &Pid) -> bool {
        self.sessions.read().by_pid.contains_key(pid)
    }

    pub fn session_of_conn(&self, conn_id: u64) -> Option<Tid> {
        self.sessions.read().by_conn.get(&conn_id).copied()
    }

    fn install_session(&self, conn: &ConnHandle, pid: Pid) -> Tid {
        let tid = mint_tid(&mut *self.rng.lock());
        let mut table = self.sessions.write();

        // This connection may already be logged in (as anyone).
        if let Some(old_tid) = table.by_conn.get(&conn.id).copied() {
            table.remove_tid(&old_tid);
            self.router.detach_session(&old_tid);
        }
        // Newest login wins: evict the previous channel of this PID.
        if let Some(old) = table.by_pid.get(&pid).cloned() {
            table.remove_tid(&old.tid);
            self.router.detach_session(&old.tid);
            if old.conn.id != conn.id {
                old.conn
                    .send(ServerFrame::error(ErrorCode::Evicted, None, "logged in from another connection"));
                old.conn.close();
            }
        }

        table.by_tid.insert(tid, pid.clone());
        table.by_conn.insert(conn.id, tid);
        table.by_pid.insert(
            pid.clone(),
            SessionEntry {
                pid: pid.clone(),
                tid,
                conn: conn.clone(),
                connected_at: Utc::now(),
            },
        );
        self.router.attach_session(tid, pid, Arc::new(ConnSink(conn.clone())));
        tid
    }

    /// One pool query; mints a PID and installs a session on `conn`.
    pub async fn register(
        &self,
        conn: &ConnHandle,
        email: &str,
        nickname: &str,
        uuid: DeviceUuid,
    ) -> Result<LoginOutcome, BrokerError> {
        validate_email(email)?;
        validate_nickname(nickname)?;
        let pid = self
            .registry
            .reserve_pid(|taken| mint_pid(taken, &mut *self.rng.lock()))?;
        let record = RegistryRecord {
            pid: pid.clone(),
            nickname: nickname.to_owned(),
            email: email.to_owned(),
            uuid,
            created_at: Utc::now(),
        };
        self.registry.insert(record).await.map_err(|e| match e {
            RegistryError::Duplicate => BrokerError::Duplicate,
            RegistryError::Db(d) => BrokerError::Db(d),
        })?;
        let tid = self.install_session(conn, pid.clone());
        Ok(LoginOutcome { pid, tid })
    }

    /// Two pool queries: resolve the credential, then verify the device.
    pub async fn login(&self, conn: &ConnHandle, credential: &str, uuid: DeviceUuid) -> Result<LoginOutcome, BrokerError> {
        if credential.trim().is_empty() {
            return Err(BrokerError::Validation("empty credential".into()));
        }
        let pid = self.registry.resolve_credential(credential).await?.ok_or(BrokerError::Unknown)?;
        let stored = self.registry.device_of(&pid).await?.ok_or(BrokerError::Unknown)?;
        if stored != uuid {
            return Err(BrokerError::Device);
        }
        let tid = self.install_session(conn, pid.clone());
        Ok(LoginOutcome { pid, tid })
    }

    fn pid_of(&self, tid: &Tid) -> Result<Pid, BrokerError> {
        self.sessions.read().by_tid.get(tid).cloned().ok_or(BrokerError::Session)
    }

    /// Served from the in-memory session map, never from the database.
    pub fn fetch_peers(&self, tid: &Tid, include_offline: bool) -> Result<Vec<PeerInfo>, BrokerError> {
        let table = self.sessions.read();
        if !table.by_tid.contains_key(tid) {
            return Err(BrokerError::Session);
        }
        let limit = self.config.max_peer_list;
        let mut peers: Vec<PeerInfo> = if include_offline {
            let dir = self.registry.directory();
            if dir.len() > limit {
                return Err(BrokerError::TooLarge(limit));
            }
            dir.into_iter()
                .map(|(pid, nickname)| PeerInfo {
                    online: table.by_pid.contains_key(&pid),
                    pid,
                    nickname,
                })
                .collect()
        } else {
            if table.by_pid.len() > limit {
                return Err(BrokerError::TooLarge(limit));
            }
            table
                .by_pid
                .keys()
                .map(|pid| PeerInfo {
                    pid: pid.clone(),
                    nickname: self.registry.nickname(pid).unwrap_or_default(),
                    online: true,
                })
                .collect()
        };
        peers.sort_by(|a, b| a.pid.cmp(&b.pid));
        Ok(peers)
    }

    fn forward(&self, from_tid: &Tid, to: &Pid, make: impl FnOnce(Pid) -> ServerFrame) -> Result<(), BrokerError> {
        let table = self.sessions.read();
        let from = table.by_tid.get(from_tid).cloned().ok_or(BrokerError::Session)?;
        let target = table.by_pid.get(to).ok_or_else(|| BrokerError::Offline(to.clone()))?;
        // Enqueued while the target is in the table, or reported offline.
        if target.conn.send(make(from)) {
            Ok(())
        } else {
            Err(BrokerError::Offline(to.clone()))
        }
    }

    /// Forward a signaling payload verbatim, tagged with the sender's PID.
    pub fn relay_signal(&self, from_tid: &Tid, to: &Pid, payload: Value) -> Result<(), BrokerError> {
        self.forward(from_tid, to, |from| ServerFrame::Signal { from, payload })
    }

    /// Relay-candidate traffic: opaque bytes for one P2P session.
    pub fn relay_data(&self, from_tid: &Tid, to: &Pid, session: String, data: String) -> Result<(), BrokerError> {
        self.forward(from_tid, to, |from| ServerFrame::Relay { from, session, data })
    }

    pub fn subscribe(&self, tid: &Tid, pattern: &str) -> Result<Sid, BrokerError> {
        Ok(self.router.subscribe(tid, pattern)?)
    }

    pub fn unsubscribe(&self, tid: &Tid, sid: Sid) -> Result<(), BrokerError> {
        self.pid_of(tid)?;
        Ok(self.router.unsubscribe(tid, sid)?)
    }

    pub fn publish(&self, tid: &Tid, envelope: Envelope) -> Result<usize, BrokerError> {
        Ok(self.router.publish(tid, envelope)?)
    }

    /// Idempotent.
    pub fn disconnect(&self, tid: &Tid) {
        let removed = self.sessions.write().remove_tid(tid);
        if removed.is_some() {
            self.router.detach_session(tid);
        }
    }

    /// Called when a channel goes away.
    pub fn drop_connection(&self, conn_id: u64) {
        let tid = self.sessions.read().by_conn.get(&conn_id).copied();
        if let Some(tid) = tid {
            self.disconnect(&tid);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn broker() -> Arc<Broker> {
        Broker::open(BrokerConfig::default()).unwrap()
    }

    fn uuid(n: u128) -> DeviceUuid {
        DeviceUuid::from_u128(n)
    }

    fn drain(rx: &mut mpsc::UnboundedReceiver<Outbound>) -> Vec<ServerFrame> {
        let mut out = Vec::new();
        while let Ok(o) = rx.try_recv() {
            if let Outbound::Frame(f) = o {
                out.push(f);
            }
        }
        out
    }

    #[tokio::test]
    async fn register_and_duplicate() {
        let b = broker();
        let (c, _rx) = ConnHandle::new();
        let first = b.register(&c, "a@x.com", "Alice", uuid(1)).await.unwrap();
        assert_eq!(b.registry().len(), 1);
        let (c2, _rx2) = ConnHandle::new();
        let err = b.register(&c2, "A@X.com", "Alice2", uuid(2)).await.unwrap_err();
        assert_eq!(err.code(), ErrorCode::Duplicate);
        assert_eq!(b.registry().len(), 1);
        assert!(b.is_online(&first.pid));
    }

    #[tokio::test]
    async fn register_costs_one_query_login_two() {
        let b = broker();
        let (c, _rx) = ConnHandle::new();
        let before = b.pool_stats().acquisitions;
        let reg = b.register(&c, "a@x.com", "Alice", uuid(1)).await.unwrap();
        assert_eq!(b.pool_stats().acquisitions - before, 1);
        let before = b.pool_stats().acquisitions;
        let login = b.login(&c, "a@x.com", uuid(1)).await.unwrap();
        assert_eq!(b.pool_stats().acquisitions - before, 2);
        assert_eq!(login.pid, reg.pid);
        assert_ne!(login.tid, reg.tid);
        // Fetching peers never touches the database.
        let before = b.pool_stats().acquisitions;
        b.fetch_peers(&login.tid, true).unwrap();
        assert_eq!(b.pool_stats().acquisitions, before);
    }

    #[tokio::test]
    async fn login_errors() {
        let b = broker();
        let (c, _rx) = ConnHandle::new();
        let reg = b.register(&c, "a@x.com", "Alice", uuid(1)).await.unwrap();
        assert_eq!(b.login(&c, "a@x.com", uuid(9)).await.unwrap_err().code(), ErrorCode::Device);
        assert_eq!(b.login(&c, "nobody@x.com", uuid(1)).await.unwrap_err().code(), ErrorCode::Unknown);
        // PID works as a credential too.
        assert_eq!(b.login(&c, reg.pid.as_str(), uuid(1)).await.unwrap().pid, reg.pid);
    }

    #[tokio::test]
    async fn relogin_evicts_old_channel() {
        let b = broker();
        let (c1, mut rx1) = ConnHandle::new();
        let reg = b.register(&c1, "a@x.com", "Alice", uuid(1)).await.unwrap();
        let (c2, _rx2) = ConnHandle::new();
        let again = b.login(&c2, "a@x.com", uuid(1)).await.unwrap();
        let frames = drain(&mut rx1);
        assert!(frames
            .iter()
            .any(|f| matches!(f, ServerFrame::Error { code: ErrorCode::Evicted, .. })));
        assert_eq!(b.fetch_peers(&reg.tid, false).unwrap_err().code(), ErrorCode::Session);
        assert_eq!(b.fetch_peers(&again.tid, false).unwrap().len(), 1);
        assert_eq!(b.session_count(), 1);
    }

    #[tokio::test]
    async fn fetch_and_disconnect() {
        let b = broker();
        let (ca, _ra) = ConnHandle::new();
        let (cb, _rb) = ConnHandle::new();
        let a = b.register(&ca, "a@x.com", "Alice", uuid(1)).await.unwrap();
        let bb = b.register(&cb, "b@x.com", "Bob", uuid(2)).await.unwrap();
        let peers = b.fetch_peers(&a.tid, false).unwrap();
        assert_eq!(peers.len(), 2);
        assert!(peers.iter().any(|p| p.pid == a.pid && p.nickname == "Alice"));
        b.disconnect(&bb.tid);
        b.disconnect(&bb.tid);
        let peers = b.fetch_peers(&a.tid, false).unwrap();
        assert_eq!(peers.len(), 1);
        let all = b.fetch_peers(&a.tid, true).unwrap();
        assert_eq!(all.iter().find(|p| p.pid == bb.pid).map(|p| p.online), Some(false));
        assert_eq!(b.relay_signal(&a.tid, &bb.pid, Value::Null).unwrap_err().code(), ErrorCode::Offline);
    }

    #[tokio::test]
    async fn peer_list_cap() {
        let b = Broker::open(BrokerConfig {
            max_peer_list: 2,
            ..Default::default()
        })
        .unwrap();
        let mut keep = Vec::new();
        let mut last = None;
        for i in 0..3u128 {
            let (c, rx) = ConnHandle::new();
            last = Some(b.register(&c, &format!("p{i}@x.com"), "P", uuid(i)).await.unwrap());
            keep.push((c, rx));
        }
        assert_eq!(b.fetch_peers(&last.unwrap().tid, false).unwrap_err().code(), ErrorCode::TooLarge);
    }

    #[tokio::test]
    async fn relay_is_verbatim_and_fifo() {
        let b = broker();
        let (ca, mut ra) = ConnHandle::new();
        let (cb, mut rb) = ConnHandle::new();
        let a = b.register(&ca, "a@x.com", "Alice", uuid(1)).await.unwrap();
        let bb = b.register(&cb, "b@x.com", "Bob", uuid(2)).await.unwrap();
        for i in 0..100 {
            b.relay_signal(&a.tid, &bb.pid, serde_json::json!({"n": i, "kind": "offer"})).unwrap();
            b.relay_signal(&bb.tid, &a.pid, serde_json::json!({"n": i})).unwrap();
        }
        let to_b: Vec<_> = drain(&mut rb)
            .into_iter()
            .filter_map(|f| match f {
                ServerFrame::Signal { from, payload } => {
                    assert_eq!(from, a.pid);
                    Some(payload["n"].as_i64().unwrap())
                }
                _ => None,
            })
            .collect();
        assert_eq!(to_b, (0..100).collect::<Vec<_>>());
        let to_a = drain(&mut ra).into_iter().filter(|f| matches!(f, ServerFrame::Signal { .. })).count();
        assert_eq!(to_a, 100);
    }

    #[tokio::test]
    async fn only_identity_is_persisted() {
        let b = broker();
        let schema = b.registry().schema().unwrap();
        assert_eq!(schema.len(), 1);
        let (table, cols) = &schema[0];
        assert_eq!(table, "peers");
        assert_eq!(cols, &["pid", "nickname", "email", "uuid", "created_at"]);
    }

    #[tokio::test]
    async fn validation_errors() {
        let b = broker();
        let (c, _rx) = ConnHandle::new();
        assert_eq!(b.register(&c, "nope", "A", uuid(1)).await.unwrap_err().code(), ErrorCode::Validation);
        assert_eq!(b.register(&c, "a@x", "", uuid(1)).await.unwrap_err().code(), ErrorCode::Validation);
        assert_eq!(b.login(&c, " ", uuid(1)).await.unwrap_err().code(), ErrorCode::Validation);
    }
}

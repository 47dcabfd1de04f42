use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use chrono::Utc;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc};

use super::filter::{Filter, Gateway, PeerProfile};
use super::market::{
    kind_attrs, quote_subject, rank_quotes, rating_subject, request_subject, wanted_attrs, AcceptNotice,
    QuoteNotice, RankedQuote, KIND_ACCEPT, KIND_QUOTE, KIND_RATING, KIND_WANTED,
};
use super::records::{Money, Quote, Rating, RecordError, Wanted, WantedStatus};
use super::store::{Store, StoreError, StoredIdentity};
use crate::client::{BrokerClient, ClientError};
use crate::model::{validate_email, validate_nickname, GeoPoint, MsgId, Pid, UuidGenerator};
use crate::p2p::{ChatMessage, P2pAgent, P2pConfig, P2pError, PeerSession};
use crate::protocol::{ClientFrame, ErrorCode};
use crate::pubsub::{AttrValue, Envelope, Sid};

const EVENT_BUFFER: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("blocked by an outbound filter")]
    Filtered,
    #[error("{0}")]
    State(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    P2p(#[from] P2pError),
}

impl From<RecordError> for NodeError {
    fn from(e: RecordError) -> Self {
        NodeError::Store(StoreError::Invalid(e))
    }
}

impl NodeError {
    pub fn code(&self) -> ErrorCode {
        match self {
            NodeError::Filtered => ErrorCode::Filtered,
            NodeError::State(_) => ErrorCode::State,
            NodeError::Validation(_) => ErrorCode::Validation,
            NodeError::Client(e) => e.code().unwrap_or(ErrorCode::Internal),
            NodeError::Store(StoreError::Invalid(RecordError::Status { .. })) => ErrorCode::State,
            NodeError::Store(StoreError::Invalid(_)) => ErrorCode::Validation,
            NodeError::Store(_) => ErrorCode::Internal,
            NodeError::P2p(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PeerConfig {
    pub broker_url: String,
    pub store_dir: PathBuf,
    pub inbound: Vec<Filter>,
    pub outbound: Vec<Filter>,
    /// Overrides the location saved with the identity.
    pub location: Option<GeoPoint>,
    pub p2p: P2pConfig,
    pub heartbeat: Option<Duration>,
}

impl PeerConfig {
    pub fn new(broker_url: impl Into<String>, store_dir: impl Into<PathBuf>) -> Self {
        PeerConfig {
            broker_url: broker_url.into(),
            store_dir: store_dir.into(),
            inbound: Vec::new(),
            outbound: Vec::new(),
            location: None,
            p2p: P2pConfig::default(),
            heartbeat: Some(crate::broker::DEFAULT_HEARTBEAT),
        }
    }
}

/// Things the application may want to show as they happen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeEvent {
    /// A request from another peer passed the inbound gateway.
    Request { wanted: Wanted },
    /// A quote on one of our open requests.
    Quote { quote: Quote },
    /// A request we quoted on was awarded.
    Accepted {
        wanted_id: MsgId,
        quote_id: MsgId,
        winner: Pid,
        won: bool,
    },
    Rating { rating: Rating },
    Chat { peer: Pid, message: ChatMessage },
    SessionOpened { peer: Pid },
}

/// Input for [`PeerNode::publish_wanted`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WantedDraft {
    pub category: String,
    #[serde(default)]
    pub description: String,
    /// Defaults to the peer's own location.
    #[serde(default)]
    pub location: Option<GeoPoint>,
    #[serde(default)]
    pub remote_capable: bool,
    pub budget: Money,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Published {
    pub wanted_id: MsgId,
    pub delivered: usize,
}

/// Inbound envelopes dropped after the gateway, by reason.
#[derive(Debug, Default)]
pub struct DropCounters {
    pub own: AtomicU64,
    pub malformed: AtomicU64,
    pub late_quotes: AtomicU64,
    pub unrelated: AtomicU64,
}

/// The peer-side application core.
pub struct PeerNode {
    store: Arc<Store>,
    client: Arc<BrokerClient>,
    agent: Arc<P2pAgent>,
    gateway: Gateway,
    identity: StoredIdentity,
    events: broadcast::Sender<NodeEvent>,
    sessions: Mutex<HashMap<Pid, Arc<PeerSession>>>,
    quote_subs: Mutex<HashMap<MsgId, Sid>>,
    drops: DropCounters,
    surfaced: AtomicU64,
}

impl PeerNode {
    /// Create an identity with the broker and save it in the store.
    pub async fn register(config: PeerConfig, email: &str, nickname: &str) -> Result<Arc<Self>, NodeError> {
        validate_email(email).map_err(|e| NodeError::Validation(e.to_string()))?;
        validate_nickname(nickname).map_err(|e| NodeError::Validation(e.to_string()))?;
        let store = Store::open(&config.store_dir)?;
        if store.load_identity().is_ok() {
            return Err(NodeError::State("store already holds an identity".into()));
        }
        let fingerprint = format!("{}|{}", config.store_dir.display(), email);
        let uuid = UuidGenerator::new()
            .generate(fingerprint.as_bytes(), Utc::now())
            .map_err(|e| NodeError::Validation(e.to_string()))?;
        let client = BrokerClient::connect(&config.broker_url, config.heartbeat).await?;
        let outcome = client.register(email, nickname, uuid).await?;
        let identity = StoredIdentity {
            uuid,
            pid: outcome.pid,
            nickname: nickname.to_owned(),
            email: email.to_owned(),
            location: config.location,
        };
        store.save_identity(&identity)?;
        Self::start(config, store, client, identity).await
    }

    /// Log in with the identity saved in the store.
    pub async fn login(config: PeerConfig) -> Result<Arc<Self>, NodeError> {
        let store = Store::open(&config.store_dir)?;
        let mut identity = store.load_identity()?;
        let client = BrokerClient::connect(&config.broker_url, config.heartbeat).await?;
        client.login(identity.pid.as_str(), identity.uuid).await?;
        if config.location.is_some() && config.location != identity.location {
            identity.location = config.location;
            store.save_identity(&identity)?;
        }
        Self::start(config, store, client, identity).await
    }

    async fn start(
        config: PeerConfig,
        store: Store,
        client: Arc<BrokerClient>,
        identity: StoredIdentity,
    ) -> Result<Arc<Self>, NodeError> {
        let agent = P2pAgent::start(client.clone(), config.p2p.clone()).await?;
        let profile = PeerProfile {
            location: identity.location,
        };
        let node = Arc::new(PeerNode {
            store: Arc::new(store),
            client,
            agent,
            gateway: Gateway::new(profile, config.inbound, config.outbound),
            identity,
            events: broadcast::channel(EVENT_BUFFER).0,
            sessions: Mutex::new(HashMap::new()),
            quote_subs: Mutex::new(HashMap::new()),
            drops: DropCounters::default(),
            surfaced: AtomicU64::new(0),
        });

        let (_, rx) = node.client.subscribe("svc.rating.>").await?;
        node.pump(rx);
        // Keep listening on requests we still care about.
        for w in node.store.all_wanted()? {
            if w.status == WantedStatus::Open && (w.requester == node.identity.pid || node.has_quoted(&w.wanted_id)?) {
                node.follow_quotes(&w.wanted_id).await?;
            }
        }

        let weak = Arc::downgrade(&node);
        let agent = node.agent.clone();
        tokio::spawn(async move {
            while let Some(session) = agent.accept().await {
                let Some(node) = weak.upgrade() else { break };
                node.attach(session);
            }
        });
        Ok(node)
    }

    pub fn pid(&self) -> &Pid {
        &self.identity.pid
    }

    pub fn identity(&self) -> &StoredIdentity {
        &self.identity
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn client(&self) -> &Arc<BrokerClient> {
        &self.client
    }

    pub fn agent(&self) -> &Arc<P2pAgent> {
        &self.agent
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn drops(&self) -> &DropCounters {
        &self.drops
    }

    /// Number of envelopes turned into application events.
    pub fn surfaced(&self) -> u64 {
        self.surfaced.load(Ordering::Relaxed)
    }

    pub fn events(&self) -> broadcast::Receiver<NodeEvent> {
        self.events.subscribe()
    }

    fn emit(&self, ev: NodeEvent) {
        let _ = self.events.send(ev);
    }

    fn has_quoted(&self, wanted: &MsgId) -> Result<bool, StoreError> {
        Ok(self.store.quotes_for(wanted)?.iter().any(|q| q.provider == self.identity.pid))
    }

    /// Handle envelopes of one subscription in arrival order.
    fn pump(self: &Arc<Self>, mut rx: mpsc::UnboundedReceiver<Envelope>) {
        let weak: Weak<Self> = Arc::downgrade(self);
        tokio::spawn(async move {
            while let Some(env) = rx.recv().await {
                let Some(node) = weak.upgrade() else { break };
                node.on_envelope(env);
            }
        });
    }

    /// Start surfacing requests on `pattern`, subject to the inbound filters.
    pub async fn watch(self: &Arc<Self>, pattern: &str) -> Result<Sid, NodeError> {
        let (sid, rx) = self.client.subscribe(pattern).await?;
        self.pump(rx);
        Ok(sid)
    }

    pub async fn unwatch(&self, sid: Sid) -> Result<(), NodeError> {
        Ok(self.client.unsubscribe(sid).await?)
    }

    async fn follow_quotes(self: &Arc<Self>, wanted: &MsgId) -> Result<(), NodeError> {
        if self.quote_subs.lock().contains_key(wanted) {
            return Ok(());
        }
        let (sid, rx) = self.client.subscribe(&quote_subject(wanted)).await?;
        self.quote_subs.lock().insert(*wanted, sid);
        self.pump(rx);
        Ok(())
    }

    fn on_envelope(&self, env: Envelope) {
        if env.sender == self.identity.pid {
            self.drops.own.fetch_add(1, Ordering::Relaxed);
            return;
        }
        if !self.gateway.check_inbound(&env).passed() {
            return;
        }
        let handled = match env.kind() {
            Some(KIND_WANTED) => self.on_wanted(&env),
            Some(KIND_QUOTE) => self.on_quote(&env),
            Some(KIND_ACCEPT) => self.on_accept(&env),
            Some(KIND_RATING) => self.on_rating(&env),
            _ => Err(Discard::Unrelated),
        };
        match handled {
            Ok(ev) => {
                self.surfaced.fetch_add(1, Ordering::Relaxed);
                self.emit(ev);
            }
            Err(Discard::Malformed) => {
                self.drops.malformed.fetch_add(1, Ordering::Relaxed);
            }
            Err(Discard::Late) => {
                self.drops.late_quotes.fetch_add(1, Ordering::Relaxed);
            }
            Err(Discard::Unrelated) => {
                self.drops.unrelated.fetch_add(1, Ordering::Relaxed);
            }
            Err(Discard::Store(e)) => tracing::warn!("storing envelope {} failed: {e}", env.id),
        }
    }

    fn on_wanted(&self, env: &Envelope) -> Result<NodeEvent, Discard> {
        let w: Wanted = serde_json::from_slice(&env.payload).map_err(|_| Discard::Malformed)?;
        w.validate().map_err(|_| Discard::Malformed)?;
        // The gateway judged the attributes; they must describe the payload.
        let attrs_agree = w.requester == env.sender
            && env.subject.as_str() == w.subject()
            && env.attr("lat").and_then(AttrValue::as_f64) == Some(w.location.lat())
            && env.attr("lon").and_then(AttrValue::as_f64) == Some(w.location.lon())
            && env.attr("remote_capable").and_then(AttrValue::as_bool) == Some(w.remote_capable);
        if !attrs_agree || w.status != WantedStatus::Open {
            return Err(Discard::Malformed);
        }
        if self.store.get_wanted(&w.wanted_id)?.is_none() {
            self.store.put_wanted(&w)?;
        }
        Ok(NodeEvent::Request { wanted: w })
    }

    fn on_quote(&self, env: &Envelope) -> Result<NodeEvent, Discard> {
        let n: QuoteNotice = serde_json::from_slice(&env.payload).map_err(|_| Discard::Malformed)?;
        if env.subject.as_str() != quote_subject(&n.wanted_id) {
            return Err(Discard::Malformed);
        }
        let Some(w) = self.store.get_wanted(&n.wanted_id)? else {
            return Err(Discard::Unrelated);
        };
        if w.requester != self.identity.pid {
            // Another provider's bid on a request we quoted.
            return Err(Discard::Unrelated);
        }
        if w.status != WantedStatus::Open {
            return Err(Discard::Late);
        }
        let quote = Quote {
            quote_id: n.quote_id,
            wanted_id: n.wanted_id,
            provider: env.sender.clone(),
            price: n.price,
            note: n.note,
            received_at: Utc::now(),
        };
        quote.validate().map_err(|_| Discard::Malformed)?;
        self.store.put_quote(&quote)?;
        Ok(NodeEvent::Quote { quote })
    }

    fn on_accept(&self, env: &Envelope) -> Result<NodeEvent, Discard> {
        let n: AcceptNotice = serde_json::from_slice(&env.payload).map_err(|_| Discard::Malformed)?;
        let Some(w) = self.store.get_wanted(&n.wanted_id)? else {
            return Err(Discard::Unrelated);
        };
        if w.requester != env.sender || env.subject.as_str() != quote_subject(&n.wanted_id) {
            return Err(Discard::Malformed);
        }
        if w.status.can_move_to(WantedStatus::Accepted) {
            self.store.set_wanted_status(&w.wanted_id, WantedStatus::Accepted)?;
        }
        Ok(NodeEvent::Accepted {
            wanted_id: n.wanted_id,
            quote_id: n.quote_id,
            won: n.winner == self.identity.pid,
            winner: n.winner,
        })
    }

    fn on_rating(&self, env: &Envelope) -> Result<NodeEvent, Discard> {
        let r: Rating = serde_json::from_slice(&env.payload).map_err(|_| Discard::Malformed)?;
        if env.subject.as_str() != rating_subject(&r.ratee) || r.validate().is_err() {
            return Err(Discard::Malformed);
        }
        if !self.store.put_rating(&r)? {
            // Already cached.
            return Err(Discard::Unrelated);
        }
        Ok(NodeEvent::Rating { rating: r })
    }

    async fn publish_checked(&self, subject: &str, attrs: crate::pubsub::Attrs, payload: Vec<u8>, id: Option<MsgId>) -> Result<usize, NodeError> {
        let mut env = Envelope::new(
            subject.parse().map_err(|e: crate::pubsub::SubjectError| NodeError::Validation(e.to_string()))?,
            self.identity.pid.clone(),
            attrs,
            payload,
        );
        if let Some(id) = id {
            env.id = id;
        }
        if !self.gateway.check_outbound(&env).passed() {
            return Err(NodeError::Filtered);
        }
        use base64::Engine;
        let frame = ClientFrame::Pub {
            seq: None,
            subject: env.subject.to_string(),
            attrs: env.attrs,
            payload_b64: base64::engine::general_purpose::STANDARD.encode(&env.payload),
            id: Some(env.id.to_string()),
            sender: None,
        };
        Ok(self.client.publish_frame(frame).await?)
    }

    /// Store a request and announce it on `svc.request.<category>`.
    pub async fn publish_wanted(self: &Arc<Self>, draft: WantedDraft) -> Result<Published, NodeError> {
        let location = draft
            .location
            .or(self.gateway.profile().location)
            .ok_or_else(|| NodeError::Validation("a request needs a location".into()))?;
        let w = Wanted {
            wanted_id: MsgId::random(),
            requester: self.identity.pid.clone(),
            category: draft.category,
            description: draft.description,
            location,
            remote_capable: draft.remote_capable,
            budget: Money::new(draft.budget.cents, &draft.budget.currency)?,
            status: WantedStatus::Open,
            created_at: Utc::now(),
        };
        w.validate()?;
        let probe = Envelope::new(
            request_subject(&w.category)
                .parse()
                .map_err(|e: crate::pubsub::SubjectError| NodeError::Validation(e.to_string()))?,
            self.identity.pid.clone(),
            wanted_attrs(&w),
            Vec::new(),
        );
        if !self.gateway.check_outbound(&probe).passed() {
            return Err(NodeError::Filtered);
        }
        self.store.put_wanted(&w)?;
        // Subscribe before announcing so no quote can slip past.
        self.follow_quotes(&w.wanted_id).await?;
        let payload = serde_json::to_vec(&w).expect("records serialize");
        let delivered = self
            .publish_checked(&request_subject(&w.category), wanted_attrs(&w), payload, Some(w.wanted_id))
            .await?;
        Ok(Published {
            wanted_id: w.wanted_id,
            delivered,
        })
    }

    /// Our own requests, oldest first.
    pub fn my_wanted(&self) -> Result<Vec<Wanted>, NodeError> {
        Ok(self.store.wanted_by(&self.identity.pid)?)
    }

    /// Requests from other peers that passed the gateway.
    pub fn inbox(&self) -> Result<Vec<Wanted>, NodeError> {
        Ok(self
            .store
            .all_wanted()?
            .into_iter()
            .filter(|w| w.requester != self.identity.pid)
            .collect())
    }

    /// Bid on another peer's open request.
    pub async fn submit_quote(self: &Arc<Self>, wanted_id: MsgId, price: Money, note: &str) -> Result<Quote, NodeError> {
        let w = self
            .store
            .get_wanted(&wanted_id)?
            .ok_or_else(|| NodeError::State(format!("unknown request {wanted_id}")))?;
        if w.requester == self.identity.pid {
            return Err(NodeError::State("cannot quote on our own request".into()));
        }
        if w.status != WantedStatus::Open {
            return Err(NodeError::State(format!("request {wanted_id} is {}", w.status)));
        }
        let quote = Quote {
            quote_id: MsgId::random(),
            wanted_id,
            provider: self.identity.pid.clone(),
            price: Money::new(price.cents, &price.currency)?,
            note: note.to_owned(),
            received_at: Utc::now(),
        };
        quote.validate()?;
        // Hear about the award.
        self.follow_quotes(&wanted_id).await?;
        let notice = QuoteNotice {
            quote_id: quote.quote_id,
            wanted_id,
            price: quote.price.clone(),
            note: quote.note.clone(),
        };
        let payload = serde_json::to_vec(&notice).expect("notices serialize");
        self.publish_checked(&quote_subject(&wanted_id), kind_attrs(KIND_QUOTE, Some(&wanted_id)), payload, Some(quote.quote_id))
            .await?;
        self.store.put_quote(&quote)?;
        Ok(quote)
    }

    /// Quotes on one of our requests, best first.
    pub fn list_quotes(&self, wanted_id: &MsgId) -> Result<Vec<RankedQuote>, NodeError> {
        let quotes = self.store.quotes_for(wanted_id)?;
        Ok(rank_quotes(quotes, |p| self.store.mean_rating(p).ok().flatten()))
    }

    /// Award a request and open a P2P session to the winner.
    ///
    /// The request stays ACCEPTED when the connection fails; call
    /// [`PeerNode::session_with`] to retry.
    pub async fn accept_quote(self: &Arc<Self>, quote_id: MsgId) -> Result<Arc<PeerSession>, NodeError> {
        let quote = self.award(quote_id).await?;
        self.session_with(&quote.provider).await
    }

    /// Mark the request ACCEPTED and tell every subscriber who won, without
    /// connecting to the winner.
    pub async fn award(&self, quote_id: MsgId) -> Result<Quote, NodeError> {
        let quote = self
            .store
            .get_quote(&quote_id)?
            .ok_or_else(|| NodeError::State(format!("unknown quote {quote_id}")))?;
        let w = self
            .store
            .get_wanted(&quote.wanted_id)?
            .ok_or_else(|| NodeError::State(format!("unknown request {}", quote.wanted_id)))?;
        if w.requester != self.identity.pid {
            return Err(NodeError::State("only the requester can accept".into()));
        }
        self.store.set_wanted_status(&w.wanted_id, WantedStatus::Accepted)?;
        let notice = AcceptNotice {
            wanted_id: w.wanted_id,
            quote_id,
            winner: quote.provider.clone(),
        };
        let payload = serde_json::to_vec(&notice).expect("notices serialize");
        self.publish_checked(&quote_subject(&w.wanted_id), kind_attrs(KIND_ACCEPT, Some(&w.wanted_id)), payload, None)
            .await?;
        Ok(quote)
    }

    /// Mark an accepted request as done.
    pub fn close_wanted(&self, wanted_id: &MsgId) -> Result<Wanted, NodeError> {
        let w = self
            .store
            .get_wanted(wanted_id)?
            .ok_or_else(|| NodeError::State(format!("unknown request {wanted_id}")))?;
        if w.requester != self.identity.pid {
            return Err(NodeError::State("only the requester can close".into()));
        }
        Ok(self.store.set_wanted_status(wanted_id, WantedStatus::Closed)?)
    }

    /// Rate a peer; the rating is cached locally and broadcast.
    pub async fn rate_peer(&self, ratee: &Pid, score: i64, comment: &str) -> Result<Rating, NodeError> {
        let r = Rating {
            rating_id: MsgId::random(),
            ratee: ratee.clone(),
            score,
            comment: comment.to_owned(),
            created_at: Utc::now(),
        };
        r.validate()?;
        self.store.put_rating(&r)?;
        let payload = serde_json::to_vec(&r).expect("records serialize");
        self.publish_checked(&rating_subject(ratee), kind_attrs(KIND_RATING, None), payload, Some(r.rating_id))
            .await?;
        Ok(r)
    }

    pub fn mean_rating(&self, pid: &Pid) -> Result<Option<f64>, NodeError> {
        Ok(self.store.mean_rating(pid)?)
    }

    /// The live session with `peer`, connecting if there is none.
    pub async fn session_with(self: &Arc<Self>, peer: &Pid) -> Result<Arc<PeerSession>, NodeError> {
        if let Some(s) = self.agent.session_with(peer) {
            self.attach(s.clone());
            return Ok(s);
        }
        let s = self.agent.connect(peer).await?;
        self.attach(s.clone());
        Ok(s)
    }

    fn attach(self: &Arc<Self>, session: Arc<PeerSession>) {
        let peer = session.remote().clone();
        {
            let mut map = self.sessions.lock();
            if map.get(&peer).is_some_and(|s| s.id() == session.id()) {
                return;
            }
            map.insert(peer.clone(), session.clone());
        }
        match self.store.chat_with(&peer) {
            Ok(h) => session.load_chat(&h),
            Err(e) => tracing::warn!("loading chat with {peer} failed: {e}"),
        }
        if let Some(mut rx) = session.take_chat_events() {
            let weak = Arc::downgrade(self);
            let from = peer.clone();
            tokio::spawn(async move {
                while let Some(m) = rx.recv().await {
                    let Some(node) = weak.upgrade() else { break };
                    if let Err(e) = node.store.put_chat(&from, std::slice::from_ref(&m)) {
                        tracing::warn!("saving chat from {from} failed: {e}");
                    }
                    node.emit(NodeEvent::Chat {
                        peer: from.clone(),
                        message: m,
                    });
                }
            });
        }
        self.emit(NodeEvent::SessionOpened { peer });
    }

    /// Send a chat line to `peer`, connecting first if needed.
    pub async fn chat(self: &Arc<Self>, peer: &Pid, body: &str) -> Result<ChatMessage, NodeError> {
        let s = self.session_with(peer).await?;
        let m = s.send_chat(body).await?;
        self.store.put_chat(peer, std::slice::from_ref(&m))?;
        Ok(m)
    }

    /// Reconcile chat history with `peer` and persist the union.
    pub async fn sync_chat(self: &Arc<Self>, peer: &Pid) -> Result<Vec<ChatMessage>, NodeError> {
        let s = self.session_with(peer).await?;
        let local = self.store.chat_with(peer)?;
        let report = s.sync_chat(&local).await?;
        self.store.put_chat(peer, &report.history)?;
        Ok(report.history)
    }

    pub fn chat_history(&self, peer: &Pid) -> Result<Vec<ChatMessage>, NodeError> {
        Ok(self.store.chat_with(peer)?.ordered())
    }

    /// Close sessions and leave the broker.
    pub async fn shutdown(&self) {
        let sessions: Vec<_> = self.sessions.lock().drain().map(|(_, s)| s).collect();
        for s in sessions {
            s.close().await;
        }
        let _ = self.client.disconnect().await;
        self.client.close();
    }
}

enum Discard {
    Malformed,
    Late,
    Unrelated,
    Store(StoreError),
}

impl From<StoreError> for Discard {
    fn from(e: StoreError) -> Self {
        Discard::Store(e)
    }
}

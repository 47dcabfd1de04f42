use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::io::AsyncWriteExt;
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::sync::{mpsc, watch};

use super::chat::{decode_records, encode_records, ChatHistory, ChatMessage, Digest, DigestPhase};
use super::wire::{self, decode_frame, encode_frame, Tag};
use super::{CandidatePair, P2pError, SessionId, SessionState};
use crate::client::BrokerClient;
use crate::model::Pid;

/// How long a chat sync waits for each digest from the other side.
const SYNC_STEP_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Offerer,
    Answerer,
}

pub(crate) enum LinkTx {
    Tcp(OwnedWriteHalf),
    Relay {
        client: Arc<BrokerClient>,
        to: Pid,
        session: String,
    },
}

impl LinkTx {
    pub(crate) async fn send(&mut self, msg: &[u8]) -> Result<(), P2pError> {
        match self {
            LinkTx::Tcp(w) => wire::write_msg(w, msg).await.map_err(|e| P2pError::ChannelBroken(e.to_string())),
            LinkTx::Relay { client, to, session } => client
                .relay(to, session, msg)
                .await
                .map_err(|e| P2pError::ChannelBroken(e.to_string())),
        }
    }

    async fn shutdown(&mut self) {
        if let LinkTx::Tcp(w) = self {
            let _ = w.shutdown().await;
        }
    }
}

pub(crate) enum LinkRx {
    Tcp(OwnedReadHalf),
    Relay(mpsc::UnboundedReceiver<Vec<u8>>),
}

impl LinkRx {
    async fn recv(&mut self) -> std::io::Result<Option<Vec<u8>>> {
        match self {
            LinkRx::Tcp(r) => wire::read_msg(r).await,
            LinkRx::Relay(rx) => Ok(rx.recv().await),
        }
    }
}

/// Counters for one session's data channel.
#[derive(Debug, Default)]
pub struct SessionStats {
    pub data_sent: AtomicUsize,
    pub data_received: AtomicUsize,
    pub digests_sent: AtomicUsize,
    pub records_sent: AtomicUsize,
    pub records_received: AtomicUsize,
    /// Malformed chat records skipped on receipt.
    pub records_skipped: AtomicUsize,
}

impl SessionStats {
    fn bump(c: &AtomicUsize, n: usize) {
        c.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(c: &AtomicUsize) -> usize {
        c.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncReport {
    /// The merged history in display order.
    pub history: Vec<ChatMessage>,
    pub records_sent: usize,
    pub records_received: usize,
    pub records_skipped: usize,
    pub digests_sent: usize,
}

/// One negotiated connection to a remote peer.
pub struct PeerSession {
    id: SessionId,
    local: Pid,
    remote: Pid,
    role: Role,
    state: watch::Sender<SessionState>,
    selected: Mutex<Option<CandidatePair>>,
    tx: tokio::sync::Mutex<Option<LinkTx>>,
    inbox_tx: Mutex<Option<mpsc::UnboundedSender<Vec<u8>>>>,
    inbox: tokio::sync::Mutex<mpsc::UnboundedReceiver<Vec<u8>>>,
    chat: Mutex<ChatHistory>,
    chat_tx: mpsc::UnboundedSender<ChatMessage>,
    chat_rx: Mutex<Option<mpsc::UnboundedReceiver<ChatMessage>>>,
    sync_lock: tokio::sync::Mutex<()>,
    sync_tx: mpsc::UnboundedSender<Digest>,
    sync_rx: tokio::sync::Mutex<mpsc::UnboundedReceiver<Digest>>,
    stats: SessionStats,
    stop: watch::Sender<bool>,
}

impl std::fmt::Debug for PeerSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeerSession")
            .field("id", &self.id)
            .field("remote", &self.remote)
            .field("role", &self.role)
            .field("state", &self.state())
            .finish()
    }
}

impl PeerSession {
    pub(crate) fn new(id: SessionId, local: Pid, remote: Pid, role: Role) -> Arc<Self> {
        let (inbox_tx, inbox) = mpsc::unbounded_channel();
        let (chat_tx, chat_rx) = mpsc::unbounded_channel();
        let (sync_tx, sync_rx) = mpsc::unbounded_channel();
        Arc::new(PeerSession {
            id,
            local,
            remote,
            role,
            state: watch::channel(SessionState::Idle).0,
            selected: Mutex::new(None),
            tx: tokio::sync::Mutex::new(None),
            inbox_tx: Mutex::new(Some(inbox_tx)),
            inbox: tokio::sync::Mutex::new(inbox),
            chat: Mutex::new(ChatHistory::new()),
            chat_tx,
            chat_rx: Mutex::new(Some(chat_rx)),
            sync_lock: tokio::sync::Mutex::new(()),
            sync_tx,
            sync_rx: tokio::sync::Mutex::new(sync_rx),
            stats: SessionStats::default(),
            stop: watch::channel(false).0,
        })
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn local(&self) -> &Pid {
        &self.local
    }

    pub fn remote(&self) -> &Pid {
        &self.remote
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn state(&self) -> SessionState {
        *self.state.borrow()
    }

    pub fn watch_state(&self) -> watch::Receiver<SessionState> {
        self.state.subscribe()
    }

    pub fn selected_pair(&self) -> Option<CandidatePair> {
        self.selected.lock().clone()
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    /// Move along the transition table; illegal moves are refused.
    pub(crate) fn advance(&self, next: SessionState) -> Result<(), P2pError> {
        let mut result = Ok(());
        self.state.send_if_modified(|s| {
            if s.can_move_to(next) {
                tracing::debug!(session = %self.id, "{s} -> {next}");
                *s = next;
                true
            } else {
                result = Err(P2pError::State(format!("cannot move from {s} to {next}")));
                false
            }
        });
        if next != SessionState::Connected && result.is_ok() {
            self.selected.lock().take();
        }
        result
    }

    /// Adopt the nominated pair and start the receive loop.
    pub(crate) fn install(self: &Arc<Self>, pair: CandidatePair, tx: LinkTx, rx: LinkRx) -> Result<(), P2pError> {
        // The sender is in place before anyone can observe CONNECTED.
        *self
            .tx
            .try_lock()
            .map_err(|_| P2pError::State("link sender busy before connect".into()))? = Some(tx);
        *self.selected.lock() = Some(pair);
        if let Err(e) = self.advance(SessionState::Connected) {
            self.selected.lock().take();
            if let Ok(mut slot) = self.tx.try_lock() {
                slot.take();
            }
            return Err(e);
        }
        let me = self.clone();
        tokio::spawn(async move { me.read_loop(rx).await });
        Ok(())
    }

    async fn read_loop(self: Arc<Self>, mut rx: LinkRx) {
        let inbox = self.inbox_tx.lock().clone();
        let mut stop = self.stop.subscribe();
        loop {
            let next = tokio::select! {
                _ = stop.wait_for(|s| *s) => break,
                n = rx.recv() => n,
            };
            let msg = match next {
                Ok(Some(m)) => m,
                Ok(None) | Err(_) => {
                    if self.state() == SessionState::Connected {
                        let _ = self.advance(SessionState::Failed);
                    }
                    break;
                }
            };
            let Some((tag, body)) = decode_frame(&msg) else {
                // Late probe echoes and unknown frames are ignored.
                continue;
            };
            match tag {
                Tag::Data => {
                    SessionStats::bump(&self.stats.data_received, 1);
                    if let Some(tx) = &inbox {
                        let _ = tx.send(body.to_vec());
                    }
                }
                Tag::ChatRecords => self.absorb_records(body),
                Tag::ChatDigest => match serde_json::from_slice::<Digest>(body) {
                    Ok(d) => self.on_digest(d).await,
                    Err(e) => tracing::debug!("bad digest: {e}"),
                },
                Tag::Close => {
                    let _ = self.advance(SessionState::Closed);
                    break;
                }
            }
        }
        // Wake any pending recv().
        self.inbox_tx.lock().take();
    }

    fn absorb_records(&self, body: &[u8]) {
        let (msgs, skipped) = decode_records(body);
        SessionStats::bump(&self.stats.records_skipped, skipped);
        SessionStats::bump(&self.stats.records_received, msgs.len());
        let fresh: Vec<ChatMessage> = {
            let mut chat = self.chat.lock();
            msgs.into_iter().filter(|m| chat.insert(m.clone())).collect()
        };
        for m in fresh {
            let _ = self.chat_tx.send(m);
        }
    }

    async fn on_digest(&self, d: Digest) {
        match d.phase {
            DigestPhase::Request => {
                let (missing, ids) = {
                    let chat = self.chat.lock();
                    (chat.missing_from(&d.ids), chat.ids())
                };
                if !missing.is_empty() {
                    let _ = self.send_records(&missing).await;
                }
                let _ = self
                    .send_digest(&Digest {
                        phase: DigestPhase::Reply,
                        ids,
                    })
                    .await;
            }
            DigestPhase::Done => {
                let _ = self
                    .send_digest(&Digest {
                        phase: DigestPhase::Ack,
                        ids: Default::default(),
                    })
                    .await;
            }
            DigestPhase::Reply | DigestPhase::Ack => {
                let _ = self.sync_tx.send(d);
            }
        }
    }

    async fn send_tagged(&self, tag: Tag, body: &[u8]) -> Result<(), P2pError> {
        if self.state() != SessionState::Connected {
            return Err(P2pError::State(format!("session is {}", self.state())));
        }
        let mut tx = self.tx.lock().await;
        let Some(link) = tx.as_mut() else {
            return Err(P2pError::State("session has no channel".into()));
        };
        if let Err(e) = link.send(&encode_frame(tag, body)).await {
            drop(tx);
            if self.state() == SessionState::Connected {
                let _ = self.advance(SessionState::Failed);
            }
            return Err(e);
        }
        Ok(())
    }

    async fn send_digest(&self, d: &Digest) -> Result<(), P2pError> {
        self.send_tagged(Tag::ChatDigest, &serde_json::to_vec(d).expect("digest serializes")).await?;
        SessionStats::bump(&self.stats.digests_sent, 1);
        Ok(())
    }

    async fn send_records(&self, msgs: &[ChatMessage]) -> Result<(), P2pError> {
        self.send_tagged(Tag::ChatRecords, &encode_records(msgs)).await?;
        SessionStats::bump(&self.stats.records_sent, msgs.len());
        Ok(())
    }

    /// Send application bytes. Delivered once and in order.
    pub async fn send(&self, bytes: &[u8]) -> Result<(), P2pError> {
        self.send_tagged(Tag::Data, bytes).await?;
        SessionStats::bump(&self.stats.data_sent, 1);
        Ok(())
    }

    /// Next application message; `None` once the channel has ended.
    pub async fn recv(&self) -> Option<Vec<u8>> {
        self.inbox.lock().await.recv().await
    }

    /// Snapshot of the session's chat history.
    pub fn chat(&self) -> ChatHistory {
        self.chat.lock().clone()
    }

    /// Seed the history this side offers when the remote syncs.
    pub fn load_chat(&self, history: &ChatHistory) {
        self.chat.lock().merge(history);
    }

    /// Chat messages learned from the remote, live or through sync.
    pub fn take_chat_events(&self) -> Option<mpsc::UnboundedReceiver<ChatMessage>> {
        self.chat_rx.lock().take()
    }

    /// Compose and send a chat line.
    pub async fn send_chat(&self, body: &str) -> Result<ChatMessage, P2pError> {
        let msg = self.chat.lock().compose(self.local.clone(), body)?;
        self.send_records(std::slice::from_ref(&msg)).await?;
        Ok(msg)
    }

    async fn next_sync_reply(&self, want: DigestPhase) -> Result<Digest, P2pError> {
        let mut rx = self.sync_rx.lock().await;
        loop {
            match tokio::time::timeout(SYNC_STEP_TIMEOUT, rx.recv()).await {
                Err(_) => return Err(P2pError::Timeout),
                Ok(None) => return Err(P2pError::ChannelBroken("session ended during sync".into())),
                Ok(Some(d)) if d.phase == want => return Ok(d),
                Ok(Some(_)) => continue,
            }
        }
    }

    /// Exchange digests and missing records until both sides hold the
    /// union of their histories.
    pub async fn sync_chat(&self, local: &ChatHistory) -> Result<SyncReport, P2pError> {
        let _guard = self.sync_lock.lock().await;
        let before = (
            SessionStats::get(&self.stats.records_sent),
            SessionStats::get(&self.stats.records_received),
            SessionStats::get(&self.stats.records_skipped),
            SessionStats::get(&self.stats.digests_sent),
        );
        self.chat.lock().merge(local);

        let ids = self.chat.lock().ids();
        self.send_digest(&Digest {
            phase: DigestPhase::Request,
            ids,
        })
        .await?;
        // Records the remote sends precede its reply on the ordered channel.
        let reply = self.next_sync_reply(DigestPhase::Reply).await?;
        let missing = self.chat.lock().missing_from(&reply.ids);
        if !missing.is_empty() {
            self.send_records(&missing).await?;
        }
        self.send_digest(&Digest {
            phase: DigestPhase::Done,
            ids: Default::default(),
        })
        .await?;
        self.next_sync_reply(DigestPhase::Ack).await?;

        Ok(SyncReport {
            history: self.chat.lock().ordered(),
            records_sent: SessionStats::get(&self.stats.records_sent) - before.0,
            records_received: SessionStats::get(&self.stats.records_received) - before.1,
            records_skipped: SessionStats::get(&self.stats.records_skipped) - before.2,
            digests_sent: SessionStats::get(&self.stats.digests_sent) - before.3,
        })
    }

    /// Close the session. Sends a close frame if the channel is up.
    pub async fn close(&self) {
        if self.state() == SessionState::Connected {
            let _ = self.send_tagged(Tag::Close, &[]).await;
        }
        if !self.state().is_terminal() {
            let _ = self.advance(SessionState::Closed);
        }
        if let Some(mut link) = self.tx.lock().await.take() {
            link.shutdown().await;
        }
        self.stop.send_replace(true);
    }

    /// Drop the link without a close frame, as if the process died.
    #[doc(hidden)]
    pub async fn sever(&self) {
        if let Some(mut link) = self.tx.lock().await.take() {
            link.shutdown().await;
        }
        if self.state() == SessionState::Connected {
            let _ = self.advance(SessionState::Failed);
        }
        self.stop.send_replace(true);
    }

    /// Used by tests to push raw bytes as a chat RECORDS frame.
    #[doc(hidden)]
    pub async fn send_raw_records(&self, body: &[u8]) -> Result<(), P2pError> {
        self.send_tagged(Tag::ChatRecords, body).await
    }
}

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Weak};

use parking_lot::Mutex;
use rand::RngExt;
use tokio::net::{TcpListener, TcpSocket, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use super::candidate::{form_pairs, Candidate, CandidateKind, CandidatePair, NetFilter};
use super::check::{check_pairs, PairResult, Prober};
use super::session::{LinkRx, LinkTx, PeerSession, Role};
use super::wire::{self, Probe};
use super::{P2pConfig, P2pError, SessionId, SessionState, SignalPhase, SignalingMessage};
use crate::client::{BrokerClient, PeerEvent};
use crate::model::Pid;
use crate::protocol::ErrorCode;

type Nominated = (CandidatePair, LinkTx, LinkRx);

enum OfferOutcome {
    Answer(Vec<Candidate>),
    Refused(String),
    /// Glare: our offer lost and the remote's offer was answered instead.
    Superseded(Result<Arc<PeerSession>, P2pError>),
}

struct Outgoing {
    session: SessionId,
    tx: mpsc::UnboundedSender<OfferOutcome>,
}

struct Answering {
    remote_candidates: Vec<Candidate>,
    nominated: Option<oneshot::Sender<Nominated>>,
}

#[derive(Default)]
struct Tables {
    outgoing: HashMap<Pid, Outgoing>,
    answering: HashMap<SessionId, Answering>,
    relay_inboxes: HashMap<String, mpsc::UnboundedSender<Vec<u8>>>,
    connected: HashMap<Pid, Weak<PeerSession>>,
}

/// Negotiates P2P sessions for one logged-in broker client.
pub struct P2pAgent {
    client: Arc<BrokerClient>,
    local: Pid,
    config: P2pConfig,
    filter: Arc<NetFilter>,
    hosts: Vec<SocketAddr>,
    tables: Mutex<Tables>,
    incoming_tx: mpsc::UnboundedSender<Arc<PeerSession>>,
    incoming: tokio::sync::Mutex<mpsc::UnboundedReceiver<Arc<PeerSession>>>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
}

impl Drop for P2pAgent {
    fn drop(&mut self) {
        for t in self.tasks.lock().drain(..) {
            t.abort();
        }
    }
}

impl P2pAgent {
    /// Bind host listeners and start consuming the client's signaling
    /// stream. The client must already be logged in.
    pub async fn start(client: Arc<BrokerClient>, config: P2pConfig) -> Result<Arc<Self>, P2pError> {
        let local = client
            .pid()
            .ok_or_else(|| P2pError::State("broker client is not logged in".into()))?;
        let mut events = client
            .take_events()
            .ok_or_else(|| P2pError::State("signaling stream already taken".into()))?;

        let mut listeners = Vec::new();
        for ip in &config.interfaces {
            match TcpListener::bind(SocketAddr::new(*ip, 0)).await {
                Ok(l) => listeners.push(l),
                Err(e) => tracing::warn!("skipping interface {ip}: {e}"),
            }
        }
        let hosts = listeners.iter().filter_map(|l| l.local_addr().ok()).collect();
        let (incoming_tx, incoming) = mpsc::unbounded_channel();
        let agent = Arc::new(P2pAgent {
            client,
            local,
            config,
            filter: Arc::new(NetFilter::new()),
            hosts,
            tables: Mutex::new(Tables::default()),
            incoming_tx,
            incoming: tokio::sync::Mutex::new(incoming),
            tasks: Mutex::new(Vec::new()),
        });

        let mut tasks = Vec::new();
        for listener in listeners {
            let weak = Arc::downgrade(&agent);
            tasks.push(tokio::spawn(async move {
                let local_addr = listener.local_addr().ok();
                while let Ok((stream, peer)) = listener.accept().await {
                    let Some(agent) = weak.upgrade() else { break };
                    let _ = stream.set_nodelay(true);
                    if let Some(la) = local_addr {
                        tokio::spawn(agent.serve_host_conn(stream, la, peer));
                    }
                }
            }));
        }
        let weak = Arc::downgrade(&agent);
        tasks.push(tokio::spawn(async move {
            while let Some(ev) = events.recv().await {
                let Some(agent) = weak.upgrade() else { break };
                agent.on_event(ev);
            }
        }));
        *agent.tasks.lock() = tasks;
        Ok(agent)
    }

    pub fn local_pid(&self) -> &Pid {
        &self.local
    }

    pub fn client(&self) -> &Arc<BrokerClient> {
        &self.client
    }

    /// Fault-injection hooks for this agent's traffic.
    pub fn filter(&self) -> &Arc<NetFilter> {
        &self.filter
    }

    pub fn config(&self) -> &P2pConfig {
        &self.config
    }

    /// Host candidates for every bound interface, then the relay candidate.
    pub fn gather_candidates(&self) -> Vec<Candidate> {
        let mut out: Vec<Candidate> = self.hosts.iter().map(|a| Candidate::host(*a)).collect();
        out.push(Candidate::relay(self.client.broker_addr()));
        out
    }

    /// Next session opened by a remote peer.
    pub async fn accept(&self) -> Option<Arc<PeerSession>> {
        self.incoming.lock().await.recv().await
    }

    /// The live session with `remote`, if any.
    pub fn session_with(&self, remote: &Pid) -> Option<Arc<PeerSession>> {
        let s = self.tables.lock().connected.get(remote)?.upgrade()?;
        (s.state() == SessionState::Connected).then_some(s)
    }

    async fn signal(&self, to: &Pid, msg: &SignalingMessage) -> Result<(), P2pError> {
        let payload = serde_json::to_value(msg).expect("signaling messages serialize");
        self.client.signal(to, payload).await.map_err(|e| match e.code() {
            Some(ErrorCode::Offline) => P2pError::Offline(to.clone()),
            _ => P2pError::Broker(e),
        })
    }

    fn signaling(&self, phase: SignalPhase, session: SessionId, to: &Pid, candidates: Vec<Candidate>) -> SignalingMessage {
        SignalingMessage {
            phase,
            session_id: session,
            from: self.local.clone(),
            to: to.clone(),
            candidates,
            reason: None,
        }
    }

    fn register_relay(&self, session: SessionId) -> mpsc::UnboundedReceiver<Vec<u8>> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.tables.lock().relay_inboxes.insert(session.to_string(), tx);
        rx
    }

    fn unregister_relay(&self, session: SessionId) {
        self.tables.lock().relay_inboxes.remove(&session.to_string());
    }

    fn mark_connected(&self, session: &Arc<PeerSession>) {
        self.tables
            .lock()
            .connected
            .insert(session.remote().clone(), Arc::downgrade(session));
    }

    fn on_event(self: &Arc<Self>, ev: PeerEvent) {
        match ev {
            PeerEvent::Relay { from, session, data } => {
                let mut t = self.tables.lock();
                if let Some(tx) = t.relay_inboxes.get(&session) {
                    if tx.send(data).is_err() {
                        t.relay_inboxes.remove(&session);
                    }
                } else {
                    tracing::debug!("relay data from {from} for unknown session {session}");
                }
            }
            PeerEvent::Signal { from, payload } => {
                let msg: SignalingMessage = match serde_json::from_value(payload) {
                    Ok(m) => m,
                    Err(e) => {
                        tracing::debug!("ignoring malformed signal from {from}: {e}");
                        return;
                    }
                };
                if msg.from != from || msg.to != self.local {
                    tracing::debug!("ignoring misaddressed signal from {from}");
                    return;
                }
                match msg.phase {
                    SignalPhase::Offer => {
                        let me = self.clone();
                        tokio::spawn(async move { me.answer(msg).await });
                    }
                    SignalPhase::Answer => {
                        let t = self.tables.lock();
                        if let Some(o) = t.outgoing.get(&from).filter(|o| o.session == msg.session_id) {
                            let _ = o.tx.send(OfferOutcome::Answer(msg.candidates));
                        }
                    }
                    SignalPhase::Bye => {
                        let mut t = self.tables.lock();
                        if let Some(o) = t.outgoing.get(&from).filter(|o| o.session == msg.session_id) {
                            let _ = o.tx.send(OfferOutcome::Refused(msg.reason.unwrap_or_default()));
                        }
                        // Dropping the nomination sender fails the answer.
                        if let Some(a) = t.answering.get_mut(&msg.session_id) {
                            a.nominated.take();
                        }
                    }
                    // All candidates travel in OFFER and ANSWER.
                    SignalPhase::Candidate => {}
                }
            }
        }
    }

    /// Open a session to `remote` as the offerer.
    pub async fn connect(self: &Arc<Self>, remote: &Pid) -> Result<Arc<PeerSession>, P2pError> {
        if *remote == self.local {
            return Err(P2pError::State("cannot connect to self".into()));
        }
        let id = SessionId::random();
        let session = PeerSession::new(id, self.local.clone(), remote.clone(), Role::Offerer);
        session.advance(SessionState::Signaling)?;

        let (tx, mut outcomes) = mpsc::unbounded_channel();
        {
            let mut t = self.tables.lock();
            if t.outgoing.contains_key(remote) {
                return Err(P2pError::State(format!("a connect to {remote} is already in progress")));
            }
            t.outgoing.insert(remote.clone(), Outgoing { session: id, tx });
        }
        let clear_outgoing = || {
            let mut t = self.tables.lock();
            if t.outgoing.get(remote).is_some_and(|o| o.session == id) {
                t.outgoing.remove(remote);
            }
        };

        let local_cands = self.gather_candidates();
        // Register before offering so early echoes are not lost.
        let relay_rx = self.register_relay(id);
        let offer = self.signaling(SignalPhase::Offer, id, remote, local_cands.clone());
        if let Err(e) = self.signal(remote, &offer).await {
            clear_outgoing();
            self.unregister_relay(id);
            let _ = session.advance(SessionState::Failed);
            return Err(e);
        }

        let outcome = tokio::time::timeout(self.config.handshake_timeout, outcomes.recv()).await;
        clear_outgoing();
        let remote_cands = match outcome {
            Ok(Some(OfferOutcome::Answer(c))) => c,
            Ok(Some(OfferOutcome::Superseded(result))) => {
                self.unregister_relay(id);
                let _ = session.advance(SessionState::Closed);
                return result;
            }
            Ok(Some(OfferOutcome::Refused(reason))) => {
                self.unregister_relay(id);
                let _ = session.advance(SessionState::Failed);
                tracing::debug!("offer to {remote} refused: {reason}");
                return Err(P2pError::Unreachable);
            }
            Ok(None) | Err(_) => {
                self.unregister_relay(id);
                let _ = session.advance(SessionState::Failed);
                let mut bye = self.signaling(SignalPhase::Bye, id, remote, Vec::new());
                bye.reason = Some("handshake timeout".into());
                let _ = self.signal(remote, &bye).await;
                return Err(P2pError::Timeout);
            }
        };

        session.advance(SessionState::Checking)?;
        let pairs = form_pairs(&local_cands, &remote_cands);
        let mut prober = AgentProber {
            agent: self.clone(),
            session: id,
            remote: remote.clone(),
            relay_rx,
        };
        let result = check_pairs(&pairs, &mut prober, self.config.check).await;
        let selected = match result {
            PairResult::Selected { pair, link, .. } => prober.nominate(pair, link).await,
            PairResult::Failed { .. } => None,
        };
        let Some((pair, tx, rx)) = selected else {
            self.unregister_relay(id);
            let _ = session.advance(SessionState::Failed);
            let mut bye = self.signaling(SignalPhase::Bye, id, remote, Vec::new());
            bye.reason = Some("no working candidate pair".into());
            let _ = self.signal(remote, &bye).await;
            return Err(P2pError::Unreachable);
        };
        if pair.kind() == CandidateKind::Host {
            self.unregister_relay(id);
        }
        session.install(pair, tx, rx)?;
        self.mark_connected(&session);
        Ok(session)
    }

    async fn answer(self: Arc<Self>, offer: SignalingMessage) {
        let remote = offer.from.clone();
        let id = offer.session_id;

        // Glare: the lower PID stays offerer.
        let superseded = {
            let mut t = self.tables.lock();
            match t.outgoing.get(&remote) {
                Some(_) if self.local < remote => {
                    tracing::debug!("glare with {remote}: keeping our offer");
                    return;
                }
                Some(_) => t.outgoing.remove(&remote).map(|o| o.tx),
                None => None,
            }
        };

        let session = PeerSession::new(id, self.local.clone(), remote.clone(), Role::Answerer);
        let result = self.run_answer(&session, offer).await;
        let result = result.map(|()| session.clone());
        match (&result, superseded) {
            (_, Some(tx)) => {
                let _ = tx.send(OfferOutcome::Superseded(result));
            }
            (Ok(s), None) => {
                let _ = self.incoming_tx.send(s.clone());
            }
            (Err(e), None) => tracing::debug!("incoming session from {remote} failed: {e}"),
        }
    }

    async fn run_answer(self: &Arc<Self>, session: &Arc<PeerSession>, offer: SignalingMessage) -> Result<(), P2pError> {
        let id = offer.session_id;
        let remote = offer.from.clone();
        session.advance(SessionState::Signaling)?;

        let (nominated_tx, nominated_rx) = oneshot::channel();
        let relay_rx = self.register_relay(id);
        self.tables.lock().answering.insert(
            id,
            Answering {
                remote_candidates: offer.candidates.clone(),
                nominated: Some(nominated_tx),
            },
        );
        let (done_tx, done_rx) = watch::channel(false);
        tokio::spawn(self.clone().answer_relay_probes(id, remote.clone(), relay_rx, done_rx));

        let answer = self.signaling(SignalPhase::Answer, id, &remote, self.gather_candidates());
        let outcome = match self.signal(&remote, &answer).await {
            Ok(()) => {
                session.advance(SessionState::Checking)?;
                let pairs = form_pairs(&offer.candidates, &self.gather_candidates()).len();
                let budget = self.config.handshake_timeout + self.config.check.exhaustion_bound(pairs + 1);
                match tokio::time::timeout(budget, nominated_rx).await {
                    Ok(Ok(n)) => Ok(n),
                    Ok(Err(_)) => Err(P2pError::Unreachable),
                    Err(_) => Err(P2pError::Timeout),
                }
            }
            Err(e) => Err(e),
        };
        let _ = done_tx.send(true);
        self.tables.lock().answering.remove(&id);

        match outcome {
            Ok((pair, tx, rx)) => {
                if pair.kind() == CandidateKind::Host {
                    self.unregister_relay(id);
                }
                session.install(pair, tx, rx)?;
                self.mark_connected(session);
                Ok(())
            }
            Err(e) => {
                self.unregister_relay(id);
                let _ = session.advance(SessionState::Failed);
                Err(e)
            }
        }
    }

    /// Echo relay probes for an answering session until it is nominated or
    /// abandoned. A nomination hands the relay inbox over to the session.
    async fn answer_relay_probes(
        self: Arc<Self>,
        id: SessionId,
        remote: Pid,
        mut rx: mpsc::UnboundedReceiver<Vec<u8>>,
        mut done: watch::Receiver<bool>,
    ) {
        loop {
            let msg = tokio::select! {
                _ = done.changed() => return,
                m = rx.recv() => match m {
                    Some(m) => m,
                    None => return,
                },
            };
            let Some(probe) = Probe::decode(&msg) else { continue };
            if probe.session != id || probe.is_echo() || !self.filter.allows_relay() {
                continue;
            }
            let session_key = id.to_string();
            if self.client.relay(&remote, &session_key, &probe.echo().encode()).await.is_err() {
                continue;
            }
            if probe.is_nomination() {
                let mut t = self.tables.lock();
                let Some(ctx) = t.answering.get_mut(&id) else { return };
                let local = Candidate::relay(self.client.broker_addr());
                let remote_cand = ctx
                    .remote_candidates
                    .iter()
                    .find(|c| c.kind == CandidateKind::Relay)
                    .cloned()
                    .unwrap_or_else(|| local.clone());
                if let Some(tx) = ctx.nominated.take() {
                    let link_tx = LinkTx::Relay {
                        client: self.client.clone(),
                        to: remote.clone(),
                        session: session_key,
                    };
                    let pair = CandidatePair {
                        local,
                        remote: remote_cand,
                    };
                    let _ = tx.send((pair, link_tx, LinkRx::Relay(rx)));
                }
                return;
            }
        }
    }

    /// Echo probes arriving on a host listener. A nomination hands the
    /// stream over to the session.
    async fn serve_host_conn(self: Arc<Self>, stream: TcpStream, local_addr: SocketAddr, peer: SocketAddr) {
        let (mut r, mut w) = stream.into_split();
        loop {
            let msg = match wire::read_msg(&mut r).await {
                Ok(Some(m)) => m,
                _ => return,
            };
            let Some(probe) = Probe::decode(&msg) else { return };
            if probe.is_echo() || !self.filter.allows_host(Some(local_addr.ip()), Some(peer.ip())) {
                continue;
            }
            let remote_cand = {
                let t = self.tables.lock();
                let Some(ctx) = t.answering.get(&probe.session) else { continue };
                ctx.remote_candidates
                    .iter()
                    .find(|c| c.kind == CandidateKind::Host && c.socket_addr().map(|a| a.ip()) == Some(peer.ip()))
                    .cloned()
                    .unwrap_or_else(|| Candidate::host(peer))
            };
            if wire::write_msg(&mut w, &probe.echo().encode()).await.is_err() {
                return;
            }
            if probe.is_nomination() {
                let tx = {
                    let mut t = self.tables.lock();
                    t.answering.get_mut(&probe.session).and_then(|c| c.nominated.take())
                };
                if let Some(tx) = tx {
                    let pair = CandidatePair {
                        local: Candidate::host(local_addr),
                        remote: remote_cand,
                    };
                    let _ = tx.send((pair, LinkTx::Tcp(w), LinkRx::Tcp(r)));
                }
                return;
            }
        }
    }
}

enum ProbeLink {
    Host(TcpStream),
    Relay,
}

struct AgentProber {
    agent: Arc<P2pAgent>,
    session: SessionId,
    remote: Pid,
    relay_rx: mpsc::UnboundedReceiver<Vec<u8>>,
}

impl AgentProber {
    fn fresh_probe(&self) -> Probe {
        Probe::new(self.session, rand::rng().random())
    }

    async fn host_round_trip(stream: &mut TcpStream, probe: Probe) -> Option<()> {
        let (mut r, mut w) = stream.split();
        wire::write_msg(&mut w, &probe.encode()).await.ok()?;
        loop {
            let msg = wire::read_msg(&mut r).await.ok()??;
            if Probe::decode(&msg).is_some_and(|e| probe.answered_by(&e)) {
                return Some(());
            }
        }
    }

    async fn relay_round_trip(&mut self, probe: Probe) -> Option<()> {
        let key = self.session.to_string();
        self.agent.client.relay(&self.remote, &key, &probe.encode()).await.ok()?;
        loop {
            let msg = self.relay_rx.recv().await?;
            if Probe::decode(&msg).is_some_and(|e| probe.answered_by(&e)) {
                return Some(());
            }
        }
    }

    async fn connect_host(pair: &CandidatePair) -> Option<TcpStream> {
        let remote = pair.remote.socket_addr()?;
        let local: IpAddr = pair.local.socket_addr()?.ip();
        let socket = if remote.is_ipv4() {
            TcpSocket::new_v4().ok()?
        } else {
            TcpSocket::new_v6().ok()?
        };
        socket.bind(SocketAddr::new(local, 0)).ok()?;
        let stream = socket.connect(remote).await.ok()?;
        let _ = stream.set_nodelay(true);
        Some(stream)
    }

    /// Confirm the selected pair with a nominating probe and turn its
    /// transport into the session link.
    async fn nominate(&mut self, pair: CandidatePair, link: ProbeLink) -> Option<Nominated> {
        let probe = self.fresh_probe().nominating();
        let wait = self.agent.config.check.interval * self.agent.config.check.probes_per_pair.max(1);
        match link {
            ProbeLink::Host(mut stream) => {
                tokio::time::timeout(wait, Self::host_round_trip(&mut stream, probe)).await.ok()??;
                let (r, w) = stream.into_split();
                Some((pair, LinkTx::Tcp(w), LinkRx::Tcp(r)))
            }
            ProbeLink::Relay => {
                tokio::time::timeout(wait, self.relay_round_trip(probe)).await.ok()??;
                let (_, placeholder) = mpsc::unbounded_channel();
                let rx = std::mem::replace(&mut self.relay_rx, placeholder);
                let tx = LinkTx::Relay {
                    client: self.agent.client.clone(),
                    to: self.remote.clone(),
                    session: self.session.to_string(),
                };
                Some((pair, tx, LinkRx::Relay(rx)))
            }
        }
    }
}

impl Prober for AgentProber {
    type Link = ProbeLink;

    async fn probe(&mut self, pair: &CandidatePair, _attempt: u32) -> Option<ProbeLink> {
        if !self.agent.filter.allows(pair) {
            // Dropped on the wire: the echo never comes.
            std::future::pending::<()>().await;
        }
        let probe = self.fresh_probe();
        match pair.kind() {
            CandidateKind::Host => {
                let mut stream = Self::connect_host(pair).await?;
                Self::host_round_trip(&mut stream, probe).await?;
                Some(ProbeLink::Host(stream))
            }
            CandidateKind::Relay => {
                self.relay_round_trip(probe).await?;
                Some(ProbeLink::Relay)
            }
        }
    }
}

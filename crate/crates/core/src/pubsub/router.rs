use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::RwLock;

use super::envelope::EnvelopeError;
use super::{Envelope, Subject, SubjectError, SubjectPattern};
use crate::model::{Pid, Tid};
use crate::pubsub::subject::PatternToken;

pub type Sid = u64;

/// Where matched envelopes are pushed for one session.
///
/// Returns false when the receiving side is gone; such deliveries are not
/// counted.
pub trait DeliverySink: Send + Sync {
    fn deliver(&self, sid: Sid, envelope: &Arc<Envelope>) -> bool;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RouterError {
    #[error("no live session")]
    UnknownSession,
    #[error("invalid pattern: {0}")]
    Pattern(#[from] SubjectError),
    #[error("subscription {0} is unknown or not owned by this session")]
    UnknownSid(Sid),
    #[error("payload too large ({0} bytes)")]
    Size(usize),
    #[error("envelope sender {claimed} does not match session {actual}")]
    Sender { claimed: Pid, actual: Pid },
    #[error("invalid envelope: {0}")]
    Envelope(EnvelopeError),
}

impl From<EnvelopeError> for RouterError {
    fn from(e: EnvelopeError) -> Self {
        match e {
            EnvelopeError::TooLarge(n) => RouterError::Size(n),
            other => RouterError::Envelope(other),
        }
    }
}

#[derive(Default)]
struct Node {
    children: HashMap<String, Node>,
    star: Option<Box<Node>>,
    exact: Vec<Sid>,
    tail: Vec<Sid>,
}

impl Node {
    fn is_empty(&self) -> bool {
        self.children.is_empty() && self.star.is_none() && self.exact.is_empty() && self.tail.is_empty()
    }

    fn insert(&mut self, tokens: &[PatternToken], sid: Sid) {
        match tokens.split_first() {
            None => self.exact.push(sid),
            Some((PatternToken::Tail, _)) => self.tail.push(sid),
            Some((PatternToken::Star, rest)) => self.star.get_or_insert_with(Default::default).insert(rest, sid),
            Some((PatternToken::Literal(l), rest)) => self.children.entry(l.clone()).or_default().insert(rest, sid),
        }
    }

    fn remove(&mut self, tokens: &[PatternToken], sid: Sid) {
        match tokens.split_first() {
            None => self.exact.retain(|s| *s != sid),
            Some((PatternToken::Tail, _)) => self.tail.retain(|s| *s != sid),
            Some((PatternToken::Star, rest)) => {
                if let Some(star) = self.star.as_mut() {
                    star.remove(rest, sid);
                    if star.is_empty() {
                        self.star = None;
                    }
                }
            }
            Some((PatternToken::Literal(l), rest)) => {
                if let Some(child) = self.children.get_mut(l) {
                    child.remove(rest, sid);
                    if child.is_empty() {
                        self.children.remove(l);
                    }
                }
            }
        }
    }

    fn collect(&self, tokens: &[&str], out: &mut Vec<Sid>) {
        let Some((head, rest)) = tokens.split_first() else {
            out.extend_from_slice(&self.exact);
            return;
        };
        out.extend_from_slice(&self.tail);
        if let Some(child) = self.children.get(*head) {
            child.collect(rest, out);
        }
        if let Some(star) = &self.star {
            star.collect(rest, out);
        }
    }
}

struct SessionSlot {
    pid: Pid,
    sink: Arc<dyn DeliverySink>,
    sids: BTreeSet<Sid>,
}

struct SubEntry {
    tid: Tid,
    pattern: SubjectPattern,
}

#[derive(Default)]
struct State {
    next_sid: Sid,
    sessions: HashMap<Tid, SessionSlot>,
    subs: HashMap<Sid, SubEntry>,
    trie: Node,
}

/// Subject router: subscriptions live in a token trie, publishes fan out to
/// every live matching subscription exactly once.
#[derive(Default)]
pub struct Router {
    state: RwLock<State>,
}

impl Router {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attach_session(&self, tid: Tid, pid: Pid, sink: Arc<dyn DeliverySink>) {
        let mut st = self.state.write();
        // Re-attaching the same tid keeps its subscriptions.
        let sids = st.sessions.remove(&tid).map(|s| s.sids).unwrap_or_default();
        st.sessions.insert(tid, SessionSlot { pid, sink, sids });
    }

    /// Drops the session and every subscription it owns.
    pub fn detach_session(&self, tid: &Tid) {
        let mut st = self.state.write();
        let Some(slot) = st.sessions.remove(tid) else { return };
        for sid in slot.sids {
            if let Some(entry) = st.subs.remove(&sid) {
                st.trie.remove(entry.pattern.tokens(), sid);
            }
        }
    }

    pub fn subscribe(&self, tid: &Tid, pattern: &str) -> Result<Sid, RouterError> {
        let pattern: SubjectPattern = pattern.parse()?;
        self.subscribe_pattern(tid, pattern)
    }

    pub fn subscribe_pattern(&self, tid: &Tid, pattern: SubjectPattern) -> Result<Sid, RouterError> {
        let mut st = self.state.write();
        if !st.sessions.contains_key(tid) {
            return Err(RouterError::UnknownSession);
        }
        st.next_sid += 1;
        let sid = st.next_sid;
        st.trie.insert(pattern.tokens(), sid);
        st.subs.insert(sid, SubEntry { tid: *tid, pattern });
        st.sessions.get_mut(tid).expect("checked above").sids.insert(sid);
        Ok(sid)
    }

    pub fn unsubscribe(&self, tid: &Tid, sid: Sid) -> Result<(), RouterError> {
        let mut st = self.state.write();
        match st.subs.get(&sid) {
            Some(entry) if entry.tid == *tid => {}
            _ => return Err(RouterError::UnknownSid(sid)),
        }
        let entry = st.subs.remove(&sid).expect("checked above");
        st.trie.remove(entry.pattern.tokens(), sid);
        if let Some(slot) = st.sessions.get_mut(tid) {
            slot.sids.remove(&sid);
        }
        Ok(())
    }

    /// Sids whose pattern matches `subject`, ascending.
    pub fn matching(&self, subject: &Subject) -> Vec<Sid> {
        let tokens: Vec<&str> = subject.tokens().collect();
        let mut out = Vec::new();
        self.state.read().trie.collect(&tokens, &mut out);
        out.sort_unstable();
        out
    }

    pub fn publish(&self, tid: &Tid, envelope: Envelope) -> Result<usize, RouterError> {
        let st = self.state.read();
        let publisher = st.sessions.get(tid).ok_or(RouterError::UnknownSession)?;
        if envelope.sender != publisher.pid {
            return Err(RouterError::Sender {
                claimed: envelope.sender.clone(),
                actual: publisher.pid.clone(),
            });
        }
        envelope.validate()?;

        let tokens: Vec<&str> = envelope.subject.tokens().collect();
        let mut sids = Vec::new();
        st.trie.collect(&tokens, &mut sids);
        sids.sort_unstable();

        let envelope = Arc::new(envelope);
        let mut delivered = 0;
        // Delivery happens under the read lock so a concurrent detach cannot
        // interleave with a half-finished fan-out.
        for sid in sids {
            let Some(entry) = st.subs.get(&sid) else { continue };
            let Some(slot) = st.sessions.get(&entry.tid) else { continue };
            if slot.sink.deliver(sid, &envelope) {
                delivered += 1;
            }
        }
        Ok(delivered)
    }

    pub fn subscription_count(&self) -> usize {
        self.state.read().subs.len()
    }

    pub fn session_count(&self) -> usize {
        self.state.read().sessions.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pubsub::Attrs;
    use parking_lot::Mutex;

    #[derive(Default)]
    struct Capture {
        got: Mutex<Vec<(Sid, String)>>,
        closed: std::sync::atomic::AtomicBool,
    }

    impl DeliverySink for Capture {
        fn deliver(&self, sid: Sid, e: &Arc<Envelope>) -> bool {
            if self.closed.load(std::sync::atomic::Ordering::SeqCst) {
                return false;
            }
            self.got.lock().push((sid, String::from_utf8(e.payload.clone()).unwrap()));
            true
        }
    }

    fn pid(n: u8) -> Pid {
        format!("PEER0{n}").parse().unwrap()
    }

    fn tid(n: u8) -> Tid {
        Tid::from_u128(n as u128)
    }

    fn env(from: u8, subject: &str, body: &str) -> Envelope {
        let mut attrs = Attrs::new();
        attrs.insert("kind".into(), "test".into());
        Envelope::new(subject.parse().unwrap(), pid(from), attrs, body.as_bytes().to_vec())
    }

    fn setup(n: u8) -> (Router, Vec<Arc<Capture>>) {
        let r = Router::new();
        let caps: Vec<_> = (0..n)
            .map(|i| {
                let c = Arc::new(Capture::default());
                r.attach_session(tid(i), pid(i), c.clone());
                c
            })
            .collect();
        (r, caps)
    }

    #[test]
    fn no_subscribers_is_zero() {
        let (r, _) = setup(1);
        assert_eq!(r.publish(&tid(0), env(0, "svc.x", "m")).unwrap(), 0);
    }

    #[test]
    fn counts_matching_only() {
        let (r, caps) = setup(4);
        r.subscribe(&tid(1), "svc.request.*").unwrap();
        r.subscribe(&tid(2), "svc.>").unwrap();
        r.subscribe(&tid(3), "svc.quote.*").unwrap();
        assert_eq!(r.publish(&tid(0), env(0, "svc.request.plumbing", "m")).unwrap(), 2);
        assert_eq!(caps[3].got.lock().len(), 0);
    }

    #[test]
    fn no_replay_of_earlier_publishes() {
        let (r, caps) = setup(2);
        r.publish(&tid(0), env(0, "a.b", "early")).unwrap();
        r.subscribe(&tid(1), "a.b").unwrap();
        assert!(caps[1].got.lock().is_empty());
        r.publish(&tid(0), env(0, "a.b", "late")).unwrap();
        assert_eq!(caps[1].got.lock().len(), 1);
    }

    #[test]
    fn duplicate_subscriptions_deliver_twice() {
        let (r, caps) = setup(2);
        let s1 = r.subscribe(&tid(1), "a.*").unwrap();
        let s2 = r.subscribe(&tid(1), "a.*").unwrap();
        assert_eq!(r.publish(&tid(0), env(0, "a.b", "m")).unwrap(), 2);
        let got = caps[1].got.lock().clone();
        assert_eq!(got, vec![(s1, "m".into()), (s2, "m".into())]);
    }

    #[test]
    fn unsubscribe_semantics() {
        let (r, caps) = setup(3);
        let exact = r.subscribe(&tid(1), "a.b").unwrap();
        let wild = r.subscribe(&tid(1), "a.>").unwrap();
        assert_eq!(r.unsubscribe(&tid(2), exact), Err(RouterError::UnknownSid(exact)));
        assert_eq!(r.unsubscribe(&tid(1), 999), Err(RouterError::UnknownSid(999)));
        r.unsubscribe(&tid(1), exact).unwrap();
        assert_eq!(r.publish(&tid(0), env(0, "a.b", "m")).unwrap(), 1);
        assert_eq!(caps[1].got.lock()[0].0, wild);
        r.unsubscribe(&tid(1), wild).unwrap();
        assert_eq!(r.publish(&tid(0), env(0, "a.b", "m")).unwrap(), 0);
    }

    #[test]
    fn sender_spoof_and_size() {
        let (r, _) = setup(2);
        assert!(matches!(r.publish(&tid(0), env(1, "a", "m")), Err(RouterError::Sender { .. })));
        let mut big = env(0, "a", "");
        big.payload = vec![0; crate::pubsub::MAX_PAYLOAD_BYTES + 1];
        assert!(matches!(r.publish(&tid(0), big), Err(RouterError::Size(_))));
        assert_eq!(r.publish(&tid(9), env(0, "a", "m")), Err(RouterError::UnknownSession));
    }

    #[test]
    fn detach_removes_subscriptions() {
        let (r, _) = setup(2);
        let base = r.subscription_count();
        for p in ["a", "a.*", "a.>", "*.b", "x.y.z"] {
            r.subscribe(&tid(1), p).unwrap();
        }
        assert_eq!(r.subscription_count(), base + 5);
        r.detach_session(&tid(1));
        assert_eq!(r.subscription_count(), base);
        assert!(r.state.read().trie.is_empty());
        assert_eq!(r.publish(&tid(0), env(0, "a.b", "m")).unwrap(), 0);
    }

    #[test]
    fn closed_sink_not_counted() {
        let (r, caps) = setup(2);
        r.subscribe(&tid(1), "a").unwrap();
        caps[1].closed.store(true, std::sync::atomic::Ordering::SeqCst);
        assert_eq!(r.publish(&tid(0), env(0, "a", "m")).unwrap(), 0);
    }

    #[test]
    fn per_publisher_fifo() {
        let (r, caps) = setup(2);
        r.subscribe(&tid(1), "seq").unwrap();
        for i in 0..100 {
            r.publish(&tid(0), env(0, "seq", &i.to_string())).unwrap();
        }
        let got: Vec<String> = caps[1].got.lock().iter().map(|(_, b)| b.clone()).collect();
        let want: Vec<String> = (0..100).map(|i| i.to_string()).collect();
        assert_eq!(got, want);
    }
}

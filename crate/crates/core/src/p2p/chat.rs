use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{MsgId, Pid};

pub const MAX_CHAT_BODY: usize = 4 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub msg_id: MsgId,
    pub author: Pid,
    pub body: String,
    pub lamport: u64,
    pub wall_time: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChatError {
    #[error("chat body is {0} bytes, limit is {MAX_CHAT_BODY}")]
    TooLong(usize),
    #[error("malformed chat record: {0}")]
    Malformed(String),
}

impl ChatMessage {
    pub fn validate(&self) -> Result<(), ChatError> {
        if self.body.len() > MAX_CHAT_BODY {
            return Err(ChatError::TooLong(self.body.len()));
        }
        Ok(())
    }

    /// Display order: lamport, then author, then id.
    fn order_key(&self) -> (u64, &Pid, MsgId) {
        (self.lamport, &self.author, self.msg_id)
    }

    /// Total order used to pick a winner when two records share an id.
    fn conflict_key(&self) -> (u64, &Pid, &str, DateTime<Utc>) {
        (self.lamport, &self.author, &self.body, self.wall_time)
    }

    pub fn from_value(v: Value) -> Result<ChatMessage, ChatError> {
        let m: ChatMessage = serde_json::from_value(v).map_err(|e| ChatError::Malformed(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// A grow-only set of chat messages keyed by id.
///
/// Merging is a union; when the same id appears with different contents the
/// smaller record under a fixed total order wins, so merge stays
/// commutative, associative and idempotent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChatHistory {
    by_id: BTreeMap<MsgId, ChatMessage>,
}

impl ChatHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_messages(msgs: impl IntoIterator<Item = ChatMessage>) -> Self {
        let mut h = Self::new();
        for m in msgs {
            h.insert(m);
        }
        h
    }

    /// True if the history changed.
    pub fn insert(&mut self, msg: ChatMessage) -> bool {
        match self.by_id.get(&msg.msg_id) {
            Some(existing) if existing.conflict_key() <= msg.conflict_key() => false,
            _ => {
                self.by_id.insert(msg.msg_id, msg);
                true
            }
        }
    }

    /// Returns the messages that were new or replaced an existing copy.
    pub fn merge(&mut self, other: &ChatHistory) -> Vec<ChatMessage> {
        other.by_id.values().filter(|m| self.insert((*m).clone())).cloned().collect()
    }

    pub fn merged(mut self, other: &ChatHistory) -> ChatHistory {
        self.merge(other);
        self
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn contains(&self, id: &MsgId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn ids(&self) -> BTreeSet<MsgId> {
        self.by_id.keys().copied().collect()
    }

    /// Messages whose ids are not in `known`.
    pub fn missing_from(&self, known: &BTreeSet<MsgId>) -> Vec<ChatMessage> {
        self.by_id.values().filter(|m| !known.contains(&m.msg_id)).cloned().collect()
    }

    /// Messages in (lamport, author) order.
    pub fn ordered(&self) -> Vec<ChatMessage> {
        let mut v: Vec<ChatMessage> = self.by_id.values().cloned().collect();
        v.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        v
    }

    pub fn next_lamport(&self) -> u64 {
        self.by_id.values().map(|m| m.lamport).max().map_or(1, |l| l + 1)
    }

    /// Append a new local message with the next Lamport timestamp.
    pub fn compose(&mut self, author: Pid, body: impl Into<String>) -> Result<ChatMessage, ChatError> {
        let msg = ChatMessage {
            msg_id: MsgId::random(),
            author,
            body: body.into(),
            lamport: self.next_lamport(),
            wall_time: Utc::now(),
        };
        msg.validate()?;
        self.insert(msg.clone());
        Ok(msg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigestPhase {
    /// Opens a sync; the receiver answers with missing records and a reply.
    Request,
    Reply,
    /// The initiator has sent everything the responder lacked.
    Done,
    Ack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digest {
    pub phase: DigestPhase,
    #[serde(default)]
    pub ids: BTreeSet<MsgId>,
}

/// Parse a RECORDS body; malformed entries are skipped and counted.
pub fn decode_records(body: &[u8]) -> (Vec<ChatMessage>, usize) {
    let Ok(values) = serde_json::from_slice::<Vec<Value>>(body) else {
        return (Vec::new(), 1);
    };
    let mut ok = Vec::with_capacity(values.len());
    let mut skipped = 0;
    for v in values {
        match ChatMessage::from_value(v) {
            Ok(m) => ok.push(m),
            Err(e) => {
                tracing::debug!("skipping chat record: {e}");
                skipped += 1;
            }
        }
    }
    (ok, skipped)
}

pub fn encode_records(msgs: &[ChatMessage]) -> Vec<u8> {
    serde_json::to_vec(msgs).expect("chat messages serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn pid(s: &str) -> Pid {
        s.parse().unwrap()
    }

    fn msg(id: u128, author: &str, lamport: u64, body: &str) -> ChatMessage {
        ChatMessage {
            msg_id: MsgId::from_u128(id),
            author: pid(author),
            body: body.into(),
            lamport,
            wall_time: Utc.timestamp_opt(1_590_537_600 + id as i64, 0).unwrap(),
        }
    }

    #[test]
    fn union_and_order() {
        let a = ChatHistory::from_messages([msg(1, "AAAAAA", 2, "x")]);
        let b = ChatHistory::from_messages([msg(2, "BBBBBB", 1, "y"), msg(3, "AAAAAA", 1, "z")]);
        let m = a.merged(&b);
        let order: Vec<u128> = m.ordered().iter().map(|m| m.msg_id.as_u128()).collect();
        assert_eq!(order, vec![3, 2, 1]);
    }

    #[test]
    fn compose_advances_clock() {
        let mut h = ChatHistory::from_messages([msg(1, "AAAAAA", 7, "x")]);
        let m = h.compose(pid("BBBBBB"), "hi").unwrap();
        assert_eq!(m.lamport, 8);
        assert!(h.compose(pid("BBBBBB"), "x".repeat(MAX_CHAT_BODY + 1)).is_err());
    }

    #[test]
    fn malformed_records_are_skipped() {
        let good = serde_json::to_value(msg(1, "AAAAAA", 1, "x")).unwrap();
        let long = serde_json::to_value(msg(2, "AAAAAA", 1, &"x".repeat(MAX_CHAT_BODY + 1))).unwrap();
        let body = serde_json::to_vec(&serde_json::json!([good, {"msg_id": "zz"}, long, 5])).unwrap();
        let (ok, skipped) = decode_records(&body);
        assert_eq!(ok.len(), 1);
        assert_eq!(skipped, 3);
    }

    fn arb_msg() -> impl Strategy<Value = ChatMessage> {
        (0u128..12, prop::sample::select(vec!["AAAAAA", "BBBBBB", "CCCCCC"]), 0u64..5, "[a-c]{0,2}")
            .prop_map(|(id, a, l, b)| msg(id, a, l, &b))
    }

    fn arb_history() -> impl Strategy<Value = ChatHistory> {
        proptest::collection::vec(arb_msg(), 0..10).prop_map(ChatHistory::from_messages)
    }

    proptest! {
        #[test]
        fn merge_is_a_semilattice(a in arb_history(), b in arb_history(), c in arb_history()) {
            prop_assert_eq!(a.clone().merged(&b), b.clone().merged(&a));
            prop_assert_eq!(a.clone().merged(&b).merged(&c), a.clone().merged(&b.clone().merged(&c)));
            prop_assert_eq!(a.clone().merged(&a), a.clone());
        }
    }
}

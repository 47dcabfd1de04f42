//! JSON text frames exchanged on the broker's `/ws` endpoint.
//!
//! Every client frame carries a `type` tag and an optional client-chosen
//! `seq` that the broker echoes in its reply. See `docs/protocol.md`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{Pid, Tid};
use crate::pubsub::{Attrs, Envelope, Sid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    #[serde(rename = "ERR_DUPLICATE")]
    Duplicate,
    #[serde(rename = "ERR_UNKNOWN")]
    Unknown,
    #[serde(rename = "ERR_DEVICE")]
    Device,
    #[serde(rename = "ERR_SESSION")]
    Session,
    #[serde(rename = "ERR_OFFLINE")]
    Offline,
    #[serde(rename = "ERR_EVICTED")]
    Evicted,
    #[serde(rename = "ERR_TOO_LARGE")]
    TooLarge,
    #[serde(rename = "ERR_PATTERN")]
    Pattern,
    #[serde(rename = "ERR_SID")]
    Sid,
    #[serde(rename = "ERR_SIZE")]
    Size,
    #[serde(rename = "ERR_SENDER")]
    Sender,
    #[serde(rename = "ERR_VALIDATION")]
    Validation,
    #[serde(rename = "ERR_BAD_FRAME")]
    BadFrame,
    #[serde(rename = "ERR_INTERNAL")]
    Internal,
    #[serde(rename = "ERR_UNREACHABLE")]
    Unreachable,
    #[serde(rename = "ERR_TIMEOUT")]
    Timeout,
    #[serde(rename = "ERR_STATE")]
    State,
    #[serde(rename = "ERR_FILTERED")]
    Filtered,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::Duplicate => "ERR_DUPLICATE",
            ErrorCode::Unknown => "ERR_UNKNOWN",
            ErrorCode::Device => "ERR_DEVICE",
            ErrorCode::Session => "ERR_SESSION",
            ErrorCode::Offline => "ERR_OFFLINE",
            ErrorCode::Evicted => "ERR_EVICTED",
            ErrorCode::TooLarge => "ERR_TOO_LARGE",
            ErrorCode::Pattern => "ERR_PATTERN",
            ErrorCode::Sid => "ERR_SID",
            ErrorCode::Size => "ERR_SIZE",
            ErrorCode::Sender => "ERR_SENDER",
            ErrorCode::Validation => "ERR_VALIDATION",
            ErrorCode::BadFrame => "ERR_BAD_FRAME",
            ErrorCode::Internal => "ERR_INTERNAL",
            ErrorCode::Unreachable => "ERR_UNREACHABLE",
            ErrorCode::Timeout => "ERR_TIMEOUT",
            ErrorCode::State => "ERR_STATE",
            ErrorCode::Filtered => "ERR_FILTERED",
        }
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClientFrame {
    Register {
        #[serde(default)]
        seq: Option<u64>,
        email: String,
        nickname: String,
        uuid: String,
    },
    Login {
        #[serde(default)]
        seq: Option<u64>,
        /// Email or PID.
        credential: String,
        uuid: String,
    },
    FetchPeers {
        #[serde(default)]
        seq: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tid: Option<String>,
        #[serde(default)]
        include_offline: bool,
    },
    Signal {
        #[serde(default)]
        seq: Option<u64>,
        to: String,
        payload: Value,
    },
    Relay {
        #[serde(default)]
        seq: Option<u64>,
        to: String,
        session: String,
        /// base64
        data: String,
    },
    Disconnect {
        #[serde(default)]
        seq: Option<u64>,
    },
    Ping {
        #[serde(default)]
        seq: Option<u64>,
    },
    Sub {
        #[serde(default)]
        seq: Option<u64>,
        pattern: String,
    },
    Unsub {
        #[serde(default)]
        seq: Option<u64>,
        sid: Sid,
    },
    Pub {
        #[serde(default)]
        seq: Option<u64>,
        subject: String,
        #[serde(default)]
        attrs: Attrs,
        #[serde(default)]
        payload_b64: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sender: Option<String>,
    },
}

impl ClientFrame {
    pub fn seq(&self) -> Option<u64> {
        match self {
            ClientFrame::Register { seq, .. }
            | ClientFrame::Login { seq, .. }
            | ClientFrame::FetchPeers { seq, .. }
            | ClientFrame::Signal { seq, .. }
            | ClientFrame::Relay { seq, .. }
            | ClientFrame::Disconnect { seq }
            | ClientFrame::Ping { seq }
            | ClientFrame::Sub { seq, .. }
            | ClientFrame::Unsub { seq, .. }
            | ClientFrame::Pub { seq, .. } => *seq,
        }
    }

    pub fn with_seq(mut self, new: u64) -> Self {
        match &mut self {
            ClientFrame::Register { seq, .. }
            | ClientFrame::Login { seq, .. }
            | ClientFrame::FetchPeers { seq, .. }
            | ClientFrame::Signal { seq, .. }
            | ClientFrame::Relay { seq, .. }
            | ClientFrame::Disconnect { seq }
            | ClientFrame::Ping { seq }
            | ClientFrame::Sub { seq, .. }
            | ClientFrame::Unsub { seq, .. }
            | ClientFrame::Pub { seq, .. } => *seq = Some(new),
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerInfo {
    pub pid: Pid,
    pub nickname: String,
    pub online: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServerFrame {
    Registered {
        seq: Option<u64>,
        pid: Pid,
        tid: Tid,
    },
    LoggedIn {
        seq: Option<u64>,
        pid: Pid,
        tid: Tid,
    },
    Peers {
        seq: Option<u64>,
        peers: Vec<PeerInfo>,
    },
    Ack {
        seq: Option<u64>,
    },
    Pong {
        seq: Option<u64>,
    },
    Subscribed {
        seq: Option<u64>,
        sid: Sid,
    },
    Published {
        seq: Option<u64>,
        delivered: usize,
    },
    Bye {
        seq: Option<u64>,
    },
    Msg {
        sid: Sid,
        envelope: Envelope,
    },
    Signal {
        from: Pid,
        payload: Value,
    },
    Relay {
        from: Pid,
        session: String,
        data: String,
    },
    Error {
        code: ErrorCode,
        seq: Option<u64>,
        detail: String,
    },
}

impl ServerFrame {
    /// The `seq` this frame answers, if it is a reply.
    pub fn reply_seq(&self) -> Option<u64> {
        match self {
            ServerFrame::Registered { seq, .. }
            | ServerFrame::LoggedIn { seq, .. }
            | ServerFrame::Peers { seq, .. }
            | ServerFrame::Ack { seq }
            | ServerFrame::Pong { seq }
            | ServerFrame::Subscribed { seq, .. }
            | ServerFrame::Published { seq, .. }
            | ServerFrame::Bye { seq }
            | ServerFrame::Error { seq, .. } => *seq,
            ServerFrame::Msg { .. } | ServerFrame::Signal { .. } | ServerFrame::Relay { .. } => None,
        }
    }

    pub fn error(code: ErrorCode, seq: Option<u64>, detail: impl Into<String>) -> Self {
        ServerFrame::Error {
            code,
            seq,
            detail: detail.into(),
        }
    }
}

/// Best-effort `seq` recovery from a frame that failed to parse.
pub fn salvage_seq(text: &str) -> Option<u64> {
    serde_json::from_str::<Value>(text).ok()?.get("seq")?.as_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_frames_parse() {
        let f: ClientFrame =
            serde_json::from_str(r#"{"type":"REGISTER","seq":3,"email":"a@x.com","nickname":"Alice","uuid":"00"}"#)
                .unwrap();
        assert_eq!(f.seq(), Some(3));
        let f: ClientFrame = serde_json::from_str(r#"{"type":"PING"}"#).unwrap();
        assert_eq!(f, ClientFrame::Ping { seq: None });
        let f: ClientFrame = serde_json::from_str(
            r#"{"type":"PUB","seq":1,"subject":"a.b","attrs":{"kind":"x","lat":5,"remote_capable":false},"payload_b64":""}"#,
        )
        .unwrap();
        match f {
            ClientFrame::Pub { attrs, .. } => {
                assert_eq!(attrs["lat"].as_f64(), Some(5.0));
                assert_eq!(attrs["remote_capable"].as_bool(), Some(false));
            }
            other => panic!("{other:?}"),
        }
        let f: ClientFrame = serde_json::from_str(r#"{"type":"FETCH_PEERS","seq":9}"#).unwrap();
        assert_eq!(f.with_seq(10).seq(), Some(10));
    }

    #[test]
    fn error_frame_shape() {
        let v = serde_json::to_value(ServerFrame::error(ErrorCode::Duplicate, Some(4), "email taken")).unwrap();
        assert_eq!(v, serde_json::json!({"type":"ERROR","code":"ERR_DUPLICATE","seq":4,"detail":"email taken"}));
    }

    #[test]
    fn signal_payload_keeps_key_order() {
        let text = r#"{"type":"SIGNAL","seq":1,"to":"ABC123","payload":{"z":1,"a":2,"m":[3]}}"#;
        let f: ClientFrame = serde_json::from_str(text).unwrap();
        let ClientFrame::Signal { payload, .. } = f else { panic!() };
        assert_eq!(serde_json::to_string(&payload).unwrap(), r#"{"z":1,"a":2,"m":[3]}"#);
    }

    #[test]
    fn salvage() {
        assert_eq!(salvage_seq(r#"{"type":"NOPE","seq":7}"#), Some(7));
        assert_eq!(salvage_seq("not json"), None);
    }
}

//! Direct peer sessions negotiated over broker signaling.
//!
//! Candidates are host TCP listeners plus one relay candidate that tunnels
//! through the broker. The offerer probes pairs in priority order, nominates
//! the first pair that echoes, and both sides then run a length-prefixed,
//! ordered data channel over it.

mod agent;
mod candidate;
mod chat;
mod check;
mod session;
mod state;
pub mod wire;

use std::net::{IpAddr, Ipv4Addr};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use agent::P2pAgent;
pub use candidate::{form_pairs, Candidate, CandidateKind, CandidatePair, NetFilter, HOST_PRIORITY, RELAY_PRIORITY};
pub use chat::{decode_records, encode_records, ChatError, ChatHistory, ChatMessage, Digest, DigestPhase, MAX_CHAT_BODY};
pub use check::{check_pairs, CheckConfig, PairResult, Prober};
pub use session::{PeerSession, Role, SessionStats, SyncReport};
pub use state::SessionState;

use crate::client::ClientError;
use crate::model::{MsgId, Pid};
use crate::protocol::ErrorCode;

/// Identifies one negotiation attempt; carried in probes and relay frames.
pub type SessionId = MsgId;

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct P2pConfig {
    /// Local addresses to offer as host candidates. Empty means relay only.
    pub interfaces: Vec<IpAddr>,
    pub check: CheckConfig,
    /// How long an offerer waits for the ANSWER.
    pub handshake_timeout: Duration,
}

impl Default for P2pConfig {
    fn default() -> Self {
        P2pConfig {
            interfaces: vec![IpAddr::V4(Ipv4Addr::LOCALHOST)],
            check: CheckConfig::default(),
            handshake_timeout: HANDSHAKE_TIMEOUT,
        }
    }
}

impl P2pConfig {
    pub fn relay_only() -> Self {
        P2pConfig {
            interfaces: Vec::new(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum P2pError {
    #[error("peer {0} is offline")]
    Offline(Pid),
    #[error("no candidate pair answered and the relay is unreachable")]
    Unreachable,
    #[error("handshake timed out")]
    Timeout,
    #[error("invalid session state: {0}")]
    State(String),
    #[error("channel broke: {0}")]
    ChannelBroken(String),
    #[error(transparent)]
    Broker(#[from] ClientError),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Chat(#[from] ChatError),
}

impl From<std::io::Error> for P2pError {
    fn from(e: std::io::Error) -> Self {
        P2pError::Io(e.to_string())
    }
}

impl P2pError {
    pub fn code(&self) -> ErrorCode {
        match self {
            P2pError::Offline(_) => ErrorCode::Offline,
            P2pError::Unreachable => ErrorCode::Unreachable,
            P2pError::Timeout => ErrorCode::Timeout,
            P2pError::State(_) | P2pError::ChannelBroken(_) => ErrorCode::State,
            P2pError::Broker(e) => e.code().unwrap_or(ErrorCode::Internal),
            P2pError::Io(_) => ErrorCode::Internal,
            P2pError::Chat(_) => ErrorCode::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SignalPhase {
    Offer,
    Answer,
    Candidate,
    Bye,
}

/// Payload of a SIGNAL frame between two agents. The broker forwards it
/// without looking inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalingMessage {
    pub phase: SignalPhase,
    pub session_id: SessionId,
    pub from: Pid,
    pub to: Pid,
    #[serde(default)]
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

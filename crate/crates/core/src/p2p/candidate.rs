use std::collections::HashSet;
use std::fmt;
use std::net::{IpAddr, SocketAddr};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

pub const HOST_PRIORITY: u32 = 126;
pub const RELAY_PRIORITY: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Host,
    Relay,
}

impl CandidateKind {
    pub fn priority(self) -> u32 {
        match self {
            CandidateKind::Host => HOST_PRIORITY,
            CandidateKind::Relay => RELAY_PRIORITY,
        }
    }
}

/// An address a peer can be reached at.
///
/// Host candidates are TCP listeners on local interfaces. The relay
/// candidate names the broker; traffic on it travels as RELAY frames.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub kind: CandidateKind,
    pub address: String,
    pub priority: u32,
}

impl Candidate {
    pub fn host(addr: SocketAddr) -> Self {
        Candidate {
            kind: CandidateKind::Host,
            address: addr.to_string(),
            priority: HOST_PRIORITY,
        }
    }

    pub fn relay(broker: impl Into<String>) -> Self {
        Candidate {
            kind: CandidateKind::Relay,
            address: broker.into(),
            priority: RELAY_PRIORITY,
        }
    }

    pub fn socket_addr(&self) -> Option<SocketAddr> {
        self.address.parse().ok()
    }
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            CandidateKind::Host => "host",
            CandidateKind::Relay => "relay",
        };
        write!(f, "{kind} {} ({})", self.address, self.priority)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub local: Candidate,
    pub remote: Candidate,
}

impl CandidatePair {
    pub fn priority(&self) -> u32 {
        self.local.priority + self.remote.priority
    }

    pub fn kind(&self) -> CandidateKind {
        self.local.kind
    }
}

/// Pairs of the same kind, in descending priority. Ties keep list order.
///
/// A host candidate cannot reach a relay candidate, so mixed pairs are
/// never formed.
pub fn form_pairs(local: &[Candidate], remote: &[Candidate]) -> Vec<CandidatePair> {
    let mut pairs: Vec<CandidatePair> = local
        .iter()
        .flat_map(|l| {
            remote.iter().filter(move |r| r.kind == l.kind).map(move |r| CandidatePair {
                local: l.clone(),
                remote: r.clone(),
            })
        })
        .collect();
    pairs.sort_by_key(|p| std::cmp::Reverse(p.priority()));
    pairs
}

#[derive(Debug, Default)]
struct Rules {
    block_host: bool,
    block_relay: bool,
    blocked_ips: HashSet<IpAddr>,
}

/// Simulated packet filter for fault-injection tests.
#[derive(Debug, Default)]
pub struct NetFilter {
    rules: RwLock<Rules>,
}

impl NetFilter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all direct (host) traffic.
    pub fn set_block_host(&self, on: bool) {
        self.rules.write().block_host = on;
    }

    /// Drop all broker-relayed session traffic.
    pub fn set_block_relay(&self, on: bool) {
        self.rules.write().block_relay = on;
    }

    /// Drop direct traffic to or from one address.
    pub fn block_ip(&self, ip: IpAddr) {
        self.rules.write().blocked_ips.insert(ip);
    }

    pub fn clear(&self) {
        *self.rules.write() = Rules::default();
    }

    pub fn allows_host(&self, local: Option<IpAddr>, remote: Option<IpAddr>) -> bool {
        let r = self.rules.read();
        !r.block_host
            && !local.is_some_and(|ip| r.blocked_ips.contains(&ip))
            && !remote.is_some_and(|ip| r.blocked_ips.contains(&ip))
    }

    pub fn allows_relay(&self) -> bool {
        !self.rules.read().block_relay
    }

    pub fn allows(&self, pair: &CandidatePair) -> bool {
        match pair.kind() {
            CandidateKind::Host => self.allows_host(
                pair.local.socket_addr().map(|a| a.ip()),
                pair.remote.socket_addr().map(|a| a.ip()),
            ),
            CandidateKind::Relay => self.allows_relay(),
        }
    }
}

//! ServiceNet: a peer-to-peer service docking network.
//!
//! Peers register with a small rendezvous broker, discover service requests
//! through subject routing, negotiate with quotes and then talk directly
//! over broker-signalled P2P sessions.

pub mod broker;
pub mod client;
pub mod loadgen;
pub mod model;
pub mod p2p;
pub mod peer;
pub mod protocol;
pub mod pubsub;

//! The peer-side core: local store, filter gateway and the marketplace
//! workflow (post, quote, accept, chat, rate).

pub mod control;
pub mod filter;
pub mod market;
mod node;
pub mod records;
pub mod store;

pub use filter::{gateway_accept, Filter, Gateway, Op, PeerProfile, Predicate, Verdict, DEFAULT_RADIUS_KM};
pub use market::{rank_quotes, RankedQuote};
pub use node::{DropCounters, NodeError, NodeEvent, PeerConfig, PeerNode, Published, WantedDraft};
pub use records::{Money, PeerRecord, Quote, Rating, Wanted, WantedStatus};
pub use store::{Store, StoreError, StoredIdentity};

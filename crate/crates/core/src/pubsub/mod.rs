//! Subject-based publish/subscribe routing.
//!
//! `*` matches exactly one token, a trailing `>` matches one or more.
//! Delivery is at-most-once per subscription with no persistence; attribute
//! filtering is left to the receiving peer.

mod envelope;
mod router;
mod subject;

pub use envelope::{AttrValue, Attrs, Envelope, EnvelopeError, MAX_PAYLOAD_BYTES};
pub use router::{DeliverySink, Router, RouterError, Sid};
pub use subject::{match_subject, PatternToken, Subject, SubjectError, SubjectPattern, MAX_SUBJECT_BYTES};

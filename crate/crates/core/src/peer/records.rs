use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{GeoPoint, MsgId, Pid};

pub const MAX_DESCRIPTION: usize = 2 * 1024;
pub const MAX_COMMENT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("invalid money amount: {0}")]
    Money(String),
    #[error("score must be between 1 and 5, got {0}")]
    Score(i64),
    #[error("{field} exceeds {limit} bytes")]
    TooLong { field: &'static str, limit: usize },
    #[error("invalid category token: {0:?}")]
    Category(String),
    #[error("status cannot move from {from} to {to}")]
    Status { from: WantedStatus, to: WantedStatus },
    #[error("invalid timestamp: {0}")]
    Timestamp(String),
    #[error("unknown status {0:?}")]
    UnknownStatus(String),
}

/// Timestamps are stored as ISO-8601 UTC strings.
pub fn format_ts(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_ts(s: &str) -> Result<DateTime<Utc>, RecordError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| RecordError::Timestamp(s.to_owned()))
}

/// Integer minor units plus an ISO-4217 code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Money {
    pub cents: i64,
    pub currency: String,
}

impl Money {
    pub fn new(cents: i64, currency: &str) -> Result<Self, RecordError> {
        let currency = currency.to_ascii_uppercase();
        if cents < 0 {
            return Err(RecordError::Money(format!("negative amount {cents}")));
        }
        if currency.len() != 3 || !currency.bytes().all(|b| b.is_ascii_uppercase()) {
            return Err(RecordError::Money(format!("bad currency code {currency:?}")));
        }
        Ok(Money { cents, currency })
    }

    pub fn usd(cents: i64) -> Self {
        Money::new(cents, "USD").expect("valid amount")
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02} {}", self.cents / 100, self.cents % 100, self.currency)
    }
}

/// Accepts `45`, `45.5`, `45.50 USD`, `$45` and `EUR 12.00`.
impl FromStr for Money {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RecordError::Money(s.to_owned());
        let mut currency = "USD".to_owned();
        let mut amount = None;
        for part in s.split_whitespace() {
            if let Some(rest) = part.strip_prefix('$') {
                amount = Some(rest.to_owned());
            } else if part.chars().all(|c| c.is_ascii_alphabetic()) {
                currency = part.to_owned();
            } else {
                amount = Some(part.to_owned());
            }
        }
        let amount = amount.ok_or_else(bad)?;
        let (whole, frac) = amount.split_once('.').unwrap_or((&amount, ""));
        if frac.len() > 2 || whole.is_empty() {
            return Err(bad());
        }
        let whole: i64 = whole.parse().map_err(|_| bad())?;
        let frac: i64 = if frac.is_empty() {
            0
        } else {
            format!("{frac:0<2}").parse().map_err(|_| bad())?
        };
        Money::new(whole.checked_mul(100).and_then(|w| w.checked_add(frac)).ok_or_else(bad)?, &currency)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRecord {
    pub peer_id: Pid,
    pub nickname: String,
    pub last_seen: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WantedStatus {
    Open,
    Accepted,
    Closed,
}

impl WantedStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            WantedStatus::Open => "OPEN",
            WantedStatus::Accepted => "ACCEPTED",
            WantedStatus::Closed => "CLOSED",
        }
    }

    pub fn can_move_to(self, next: WantedStatus) -> bool {
        matches!(
            (self, next),
            (WantedStatus::Open, WantedStatus::Accepted) | (WantedStatus::Accepted, WantedStatus::Closed)
        )
    }
}

impl fmt::Display for WantedStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WantedStatus {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "OPEN" => Ok(WantedStatus::Open),
            "ACCEPTED" => Ok(WantedStatus::Accepted),
            "CLOSED" => Ok(WantedStatus::Closed),
            other => Err(RecordError::UnknownStatus(other.to_owned())),
        }
    }
}

/// A service request, ours or one received from another peer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wanted {
    pub wanted_id: MsgId,
    pub requester: Pid,
    pub category: String,
    pub description: String,
    pub location: GeoPoint,
    pub remote_capable: bool,
    pub budget: Money,
    pub status: WantedStatus,
    pub created_at: DateTime<Utc>,
}

pub fn validate_category(c: &str) -> Result<(), RecordError> {
    if !c.is_empty() && c.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-') {
        Ok(())
    } else {
        Err(RecordError::Category(c.to_owned()))
    }
}

impl Wanted {
    pub fn validate(&self) -> Result<(), RecordError> {
        validate_category(&self.category)?;
        if self.description.len() > MAX_DESCRIPTION {
            return Err(RecordError::TooLong {
                field: "description",
                limit: MAX_DESCRIPTION,
            });
        }
        Money::new(self.budget.cents, &self.budget.currency)?;
        Ok(())
    }

    pub fn subject(&self) -> String {
        format!("svc.request.{}", self.category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub quote_id: MsgId,
    pub wanted_id: MsgId,
    pub provider: Pid,
    pub price: Money,
    pub note: String,
    pub received_at: DateTime<Utc>,
}

impl Quote {
    pub fn validate(&self) -> Result<(), RecordError> {
        Money::new(self.price.cents, &self.price.currency)?;
        if self.note.len() > MAX_DESCRIPTION {
            return Err(RecordError::TooLong {
                field: "note",
                limit: MAX_DESCRIPTION,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub rating_id: MsgId,
    pub ratee: Pid,
    pub score: i64,
    pub comment: String,
    pub created_at: DateTime<Utc>,
}

impl Rating {
    pub fn validate(&self) -> Result<(), RecordError> {
        if !(1..=5).contains(&self.score) {
            return Err(RecordError::Score(self.score));
        }
        if self.comment.len() > MAX_COMMENT {
            return Err(RecordError::TooLong {
                field: "comment",
                limit: MAX_COMMENT,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn money_parsing() {
        assert_eq!("45".parse::<Money>().unwrap(), Money::usd(4500));
        assert_eq!("$45.5".parse::<Money>().unwrap(), Money::usd(4550));
        assert_eq!("12.05 eur".parse::<Money>().unwrap(), Money::new(1205, "EUR").unwrap());
        assert_eq!("EUR 3".parse::<Money>().unwrap(), Money::new(300, "EUR").unwrap());
        assert!("4.555".parse::<Money>().is_err());
        assert!("-1".parse::<Money>().is_err());
        assert!("abc".parse::<Money>().is_err());
        assert_eq!(Money::usd(4505).to_string(), "45.05 USD");
    }

    #[test]
    fn timestamps_round_trip_exactly() {
        let t = parse_ts("2020-05-27T00:00:00Z").unwrap();
        assert_eq!(format_ts(&t), "2020-05-27T00:00:00Z");
        let t = parse_ts("2020-05-27T01:02:03.123456789Z").unwrap();
        assert_eq!(parse_ts(&format_ts(&t)).unwrap(), t);
    }

    #[test]
    fn status_transitions() {
        use WantedStatus::*;
        assert!(Open.can_move_to(Accepted));
        assert!(Accepted.can_move_to(Closed));
        assert!(!Open.can_move_to(Closed));
        assert!(!Accepted.can_move_to(Open));
        assert!(!Closed.can_move_to(Open));
    }

    #[test]
    fn rating_bounds() {
        let mut r = Rating {
            rating_id: MsgId::from_u128(1),
            ratee: "AAAAAA".parse().unwrap(),
            score: 5,
            comment: String::new(),
            created_at: Utc::now(),
        };
        assert!(r.validate().is_ok());
        r.score = 0;
        assert_eq!(r.validate(), Err(RecordError::Score(0)));
        r.score = 6;
        assert!(r.validate().is_err());
    }
}

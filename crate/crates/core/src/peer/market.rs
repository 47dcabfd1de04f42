use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::records::{Money, Quote, Rating, Wanted};
use crate::model::{MsgId, Pid};
use crate::pubsub::{AttrValue, Attrs};

pub fn mean(scores: &[i64]) -> Option<f64> {
    (!scores.is_empty()).then(|| scores.iter().sum::<i64>() as f64 / scores.len() as f64)
}

/// A quote with the provider's locally cached mean rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedQuote {
    #[serde(flatten)]
    pub quote: Quote,
    pub mean_rating: Option<f64>,
}

/// Price ascending, then mean rating descending (unrated last), then
/// arrival time, then quote id so the order is total.
pub fn compare(a: &RankedQuote, b: &RankedQuote) -> Ordering {
    a.quote
        .price
        .cents
        .cmp(&b.quote.price.cents)
        .then_with(|| a.quote.price.currency.cmp(&b.quote.price.currency))
        .then_with(|| match (a.mean_rating, b.mean_rating) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        })
        .then_with(|| a.quote.received_at.cmp(&b.quote.received_at))
        .then_with(|| a.quote.quote_id.cmp(&b.quote.quote_id))
}

/// Advisory order; the human still picks.
pub fn rank_quotes(quotes: Vec<Quote>, rating_of: impl Fn(&Pid) -> Option<f64>) -> Vec<RankedQuote> {
    let mut out: Vec<RankedQuote> = quotes
        .into_iter()
        .map(|quote| RankedQuote {
            mean_rating: rating_of(&quote.provider),
            quote,
        })
        .collect();
    out.sort_by(compare);
    out
}

pub const KIND_WANTED: &str = "wanted";
pub const KIND_QUOTE: &str = "quote";
pub const KIND_ACCEPT: &str = "accept";
pub const KIND_RATING: &str = "rating";

pub fn request_subject(category: &str) -> String {
    format!("svc.request.{category}")
}

pub fn quote_subject(wanted: &MsgId) -> String {
    format!("svc.quote.{wanted}")
}

pub fn rating_subject(ratee: &Pid) -> String {
    format!("svc.rating.{ratee}")
}

pub fn wanted_attrs(w: &Wanted) -> Attrs {
    let mut a = Attrs::new();
    a.insert("kind".into(), KIND_WANTED.into());
    a.insert("lat".into(), AttrValue::Num(w.location.lat()));
    a.insert("lon".into(), AttrValue::Num(w.location.lon()));
    a.insert("remote_capable".into(), w.remote_capable.into());
    a.insert("wanted_id".into(), w.wanted_id.to_string().into());
    a.insert("category".into(), w.category.clone().into());
    a.insert("budget".into(), AttrValue::Num(w.budget.cents as f64));
    a
}

pub fn kind_attrs(kind: &str, wanted: Option<&MsgId>) -> Attrs {
    let mut a = Attrs::new();
    a.insert("kind".into(), kind.into());
    if let Some(w) = wanted {
        a.insert("wanted_id".into(), w.to_string().into());
    }
    a
}

/// Payload of a `quote` envelope. The provider is the envelope sender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteNotice {
    pub quote_id: MsgId,
    pub wanted_id: MsgId,
    pub price: Money,
    pub note: String,
}

/// Payload of an `accept` envelope, seen by every provider that quoted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptNotice {
    pub wanted_id: MsgId,
    pub quote_id: MsgId,
    pub winner: Pid,
}

/// Payload of a `rating` envelope. Authorship is not verified.
pub type RatingNotice = Rating;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peer::records::parse_ts;
    use chrono::Duration;
    use proptest::prelude::*;

    fn quote(id: u128, provider: &str, cents: i64, secs: i64) -> Quote {
        Quote {
            quote_id: MsgId::from_u128(id),
            wanted_id: MsgId::from_u128(0),
            provider: provider.parse().unwrap(),
            price: Money::usd(cents),
            note: String::new(),
            received_at: parse_ts("2020-05-27T00:00:00Z").unwrap() + Duration::seconds(secs),
        }
    }

    #[test]
    fn cheaper_and_better_rated_first() {
        let alice = quote(1, "A11CE0", 5000, 0);
        let bob = quote(2, "B0B000", 4500, 1);
        let ranked = rank_quotes(vec![alice, bob], |p| Some(if p.as_str() == "B0B000" { 4.8 } else { 4.0 }));
        assert_eq!(ranked[0].quote.provider.as_str(), "B0B000");
    }

    #[test]
    fn equal_price_prefers_rating_then_unrated_last() {
        let q = vec![quote(1, "AAAAAA", 100, 0), quote(2, "BBBBBB", 100, 0), quote(3, "CCCCCC", 100, 0)];
        let ranked = rank_quotes(q, |p| match p.as_str() {
            "AAAAAA" => Some(4.0),
            "BBBBBB" => Some(4.8),
            _ => None,
        });
        let order: Vec<_> = ranked.iter().map(|r| r.quote.provider.as_str()).collect();
        assert_eq!(order, ["BBBBBB", "AAAAAA", "CCCCCC"]);
    }

    #[test]
    fn mean_of_ratings() {
        assert!((mean(&[5, 4, 5]).unwrap() - 14.0 / 3.0).abs() < 1e-9);
        assert_eq!(mean(&[]), None);
    }

    fn arb_ranked() -> impl Strategy<Value = RankedQuote> {
        (0u128..50, 0i64..4, prop::option::of(1u8..=5), 0i64..3).prop_map(|(id, price, rating, t)| RankedQuote {
            quote: quote(id, "AAAAAA", price * 100, t),
            mean_rating: rating.map(|r| r as f64 / 1.5),
        })
    }

    /// Key-based oracle: sort by an explicit tuple.
    fn oracle_key(r: &RankedQuote) -> (i64, String, u8, i64, i64, MsgId) {
        let (unrated, neg) = match r.mean_rating {
            Some(x) => (0, -(x * 1e6).round() as i64),
            None => (1, 0),
        };
        (
            r.quote.price.cents,
            r.quote.price.currency.clone(),
            unrated,
            neg,
            r.quote.received_at.timestamp_nanos_opt().unwrap(),
            r.quote.quote_id,
        )
    }

    proptest! {
        #[test]
        fn comparator_is_a_total_order(a in arb_ranked(), b in arb_ranked(), c in arb_ranked()) {
            prop_assert_eq!(compare(&a, &b), compare(&b, &a).reverse());
            if compare(&a, &b) != Ordering::Greater && compare(&b, &c) != Ordering::Greater {
                prop_assert_ne!(compare(&a, &c), Ordering::Greater);
            }
            prop_assert_eq!(compare(&a, &b), oracle_key(&a).cmp(&oracle_key(&b)));
        }

        #[test]
        fn ranking_equals_sort_oracle(qs in prop::collection::vec(arb_ranked(), 0..30)) {
            // One provider per quote so ratings can be looked up by PID.
            let pids: Vec<Pid> = (0..qs.len()).map(|i| format!("P{i:05}").parse().unwrap()).collect();
            let expected_input: Vec<RankedQuote> = qs
                .into_iter()
                .zip(&pids)
                .enumerate()
                .map(|(i, (mut r, pid))| {
                    r.quote.provider = pid.clone();
                    r.quote.quote_id = MsgId::from_u128(r.quote.quote_id.as_u128() * 100 + i as u128);
                    r
                })
                .collect();
            let ratings: std::collections::HashMap<Pid, Option<f64>> =
                expected_input.iter().map(|r| (r.quote.provider.clone(), r.mean_rating)).collect();
            let mut expected = expected_input.clone();
            expected.sort_by_key(oracle_key);
            let got = rank_quotes(expected_input.into_iter().map(|r| r.quote).collect(), |p| ratings[p]);
            prop_assert_eq!(got, expected);
        }
    }
}

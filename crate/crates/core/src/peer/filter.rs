use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::model::{haversine_km, GeoPoint};
use crate::pubsub::{AttrValue, Envelope, SubjectError, SubjectPattern};

pub const DEFAULT_RADIUS_KM: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FilterError {
    #[error("bad subject pattern: {0}")]
    Pattern(#[from] SubjectError),
    #[error("bad predicate {0:?}")]
    Predicate(String),
    #[error("within_km needs a non-negative radius, got {0:?}")]
    Radius(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Eq,
    Lt,
    Le,
    Gt,
    Ge,
    WithinKm,
}

impl Op {
    fn symbol(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
            Op::WithinKm => "=",
        }
    }
}

/// One attribute test. `within_km` reads the envelope's `lat`/`lon` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub key: String,
    pub op: Op,
    pub value: AttrValue,
}

/// Why a predicate did not pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Miss {
    False,
    Missing,
}

impl Predicate {
    pub fn within_km(radius: f64) -> Self {
        Predicate {
            key: "within_km".into(),
            op: Op::WithinKm,
            value: AttrValue::Num(radius),
        }
    }

    fn eval(&self, env: &Envelope, me: &PeerProfile) -> Result<(), Miss> {
        if self.op == Op::WithinKm {
            if env.attr("remote_capable").and_then(AttrValue::as_bool) == Some(true) {
                return Ok(());
            }
            let lat = env.attr("lat").and_then(AttrValue::as_f64);
            let lon = env.attr("lon").and_then(AttrValue::as_f64);
            let (Some(lat), Some(lon), Some(here)) = (lat, lon, me.location) else {
                return Err(Miss::Missing);
            };
            let Ok(there) = GeoPoint::new(lat, lon) else {
                return Err(Miss::Missing);
            };
            let radius = self.value.as_f64().unwrap_or(DEFAULT_RADIUS_KM);
            return if haversine_km(&here, &there) <= radius {
                Ok(())
            } else {
                Err(Miss::False)
            };
        }
        let actual = env.attr(&self.key).ok_or(Miss::Missing)?;
        let pass = match (actual, &self.value) {
            (AttrValue::Num(a), AttrValue::Num(b)) => match self.op {
                Op::Eq => a == b,
                Op::Lt => a < b,
                Op::Le => a <= b,
                Op::Gt => a > b,
                Op::Ge => a >= b,
                Op::WithinKm => unreachable!(),
            },
            (AttrValue::Str(a), AttrValue::Str(b)) => match self.op {
                Op::Eq => a == b,
                Op::Lt => a < b,
                Op::Le => a <= b,
                Op::Gt => a > b,
                Op::Ge => a >= b,
                Op::WithinKm => unreachable!(),
            },
            (AttrValue::Bool(a), AttrValue::Bool(b)) => self.op == Op::Eq && a == b,
            _ => false,
        };
        if pass {
            Ok(())
        } else {
            Err(Miss::False)
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.key, self.op.symbol(), self.value)
    }
}

fn parse_value(s: &str) -> AttrValue {
    match s {
        "true" => AttrValue::Bool(true),
        "false" => AttrValue::Bool(false),
        _ => match s.parse::<f64>() {
            Ok(n) if n.is_finite() => AttrValue::Num(n),
            _ => AttrValue::Str(s.to_owned()),
        },
    }
}

impl FromStr for Predicate {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FilterError::Predicate(s.to_owned());
        // Two-character operators first so `<=` is not read as `<`.
        let (op, at, len) = [("<=", Op::Le), (">=", Op::Ge), ("<", Op::Lt), (">", Op::Gt), ("=", Op::Eq)]
            .into_iter()
            .find_map(|(sym, op)| s.find(sym).map(|i| (op, i, sym.len())))
            .ok_or_else(bad)?;
        let key = s[..at].trim();
        let raw = s[at + len..].trim();
        if key.is_empty() || raw.is_empty() || key.chars().any(|c| !(c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')) {
            return Err(bad());
        }
        if key == "within_km" {
            return match (op, raw.parse::<f64>()) {
                (Op::Eq, Ok(r)) if r.is_finite() && r >= 0.0 => Ok(Predicate::within_km(r)),
                _ => Err(FilterError::Radius(raw.to_owned())),
            };
        }
        Ok(Predicate {
            key: key.to_owned(),
            op,
            value: parse_value(raw),
        })
    }
}

/// A subject pattern plus attribute predicates, written
/// `pattern;key=value;key<=value;within_km=25`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Filter {
    pub pattern: SubjectPattern,
    pub predicates: Vec<Predicate>,
}

impl Filter {
    pub fn new(pattern: SubjectPattern) -> Self {
        Filter {
            pattern,
            predicates: Vec::new(),
        }
    }

    pub fn with(mut self, p: Predicate) -> Self {
        self.predicates.push(p);
        self
    }

    fn eval(&self, env: &Envelope, me: &PeerProfile) -> Verdict {
        if !self.pattern.matches(&env.subject) {
            return Verdict::NoMatch;
        }
        let mut missing = false;
        for p in &self.predicates {
            match p.eval(env, me) {
                Ok(()) => {}
                Err(Miss::False) => return Verdict::Rejected,
                Err(Miss::Missing) => missing = true,
            }
        }
        if missing {
            Verdict::MissingAttr
        } else {
            Verdict::Accept
        }
    }
}

impl FromStr for Filter {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(';');
        let pattern = parts.next().unwrap_or_default().trim().parse()?;
        let predicates = parts
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        Ok(Filter { pattern, predicates })
    }
}

impl TryFrom<String> for Filter {
    type Error = FilterError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Filter> for String {
    fn from(f: Filter) -> String {
        f.to_string()
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.pattern)?;
        for p in &self.predicates {
            write!(f, ";{p}")?;
        }
        Ok(())
    }
}

/// What the gateway knows about its own peer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PeerProfile {
    pub location: Option<GeoPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    /// No filter's pattern covers the subject.
    NoMatch,
    /// A matching filter had a predicate that evaluated false.
    Rejected,
    /// A matching filter referenced an attribute the envelope lacks.
    MissingAttr,
}

impl Verdict {
    pub fn passed(self) -> bool {
        self == Verdict::Accept
    }
}

/// Pure gateway decision: accept iff some filter matches the subject and
/// all of its predicates hold. Missing attributes fail closed.
pub fn evaluate(filters: &[Filter], env: &Envelope, me: &PeerProfile) -> Verdict {
    let mut out = Verdict::NoMatch;
    for f in filters {
        match f.eval(env, me) {
            Verdict::Accept => return Verdict::Accept,
            Verdict::MissingAttr => out = Verdict::MissingAttr,
            Verdict::Rejected if out == Verdict::NoMatch => out = Verdict::Rejected,
            _ => {}
        }
    }
    out
}

pub fn gateway_accept(env: &Envelope, filters: &[Filter], me: &PeerProfile) -> bool {
    evaluate(filters, env, me).passed()
}

#[derive(Debug, Default)]
pub struct GatewayCounters {
    pub inbound_accepted: AtomicU64,
    pub inbound_rejected: AtomicU64,
    pub outbound_accepted: AtomicU64,
    pub outbound_rejected: AtomicU64,
    /// Envelopes rejected because a predicate referenced a missing attribute.
    pub missing_attr: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewaySnapshot {
    pub inbound_accepted: u64,
    pub inbound_rejected: u64,
    pub outbound_accepted: u64,
    pub outbound_rejected: u64,
    pub missing_attr: u64,
}

/// Every message a peer publishes or displays passes through here.
///
/// Inbound traffic needs an explicit match (an empty list shows nothing);
/// outbound traffic is allowed unless outbound filters exist and none match.
/// System filters admit the peer's own protocol traffic regardless of user
/// settings.
#[derive(Debug, Default)]
pub struct Gateway {
    inbound: RwLock<Vec<Filter>>,
    outbound: RwLock<Vec<Filter>>,
    system: Vec<Filter>,
    profile: RwLock<PeerProfile>,
    counters: GatewayCounters,
}

impl Gateway {
    pub fn new(profile: PeerProfile, inbound: Vec<Filter>, outbound: Vec<Filter>) -> Self {
        Gateway {
            inbound: RwLock::new(inbound),
            outbound: RwLock::new(outbound),
            system: ["svc.quote.>", "svc.rating.>"]
                .into_iter()
                .map(|p| Filter::new(p.parse().expect("static pattern")))
                .collect(),
            profile: RwLock::new(profile),
            counters: GatewayCounters::default(),
        }
    }

    pub fn profile(&self) -> PeerProfile {
        *self.profile.read()
    }

    pub fn set_location(&self, location: Option<GeoPoint>) {
        self.profile.write().location = location;
    }

    pub fn inbound_filters(&self) -> Vec<Filter> {
        self.inbound.read().clone()
    }

    pub fn outbound_filters(&self) -> Vec<Filter> {
        self.outbound.read().clone()
    }

    pub fn add_inbound(&self, f: Filter) {
        self.inbound.write().push(f);
    }

    pub fn add_outbound(&self, f: Filter) {
        self.outbound.write().push(f);
    }

    pub fn set_inbound(&self, filters: Vec<Filter>) {
        *self.inbound.write() = filters;
    }

    pub fn set_outbound(&self, filters: Vec<Filter>) {
        *self.outbound.write() = filters;
    }

    fn count(&self, v: Verdict, ok: &AtomicU64, rejected: &AtomicU64) -> Verdict {
        if v.passed() {
            ok.fetch_add(1, Ordering::Relaxed);
        } else {
            rejected.fetch_add(1, Ordering::Relaxed);
            if v == Verdict::MissingAttr {
                self.counters.missing_attr.fetch_add(1, Ordering::Relaxed);
            }
        }
        v
    }

    pub fn check_inbound(&self, env: &Envelope) -> Verdict {
        let me = self.profile();
        let v = match evaluate(&self.system, env, &me) {
            Verdict::Accept => Verdict::Accept,
            _ => evaluate(&self.inbound.read(), env, &me),
        };
        self.count(v, &self.counters.inbound_accepted, &self.counters.inbound_rejected)
    }

    pub fn check_outbound(&self, env: &Envelope) -> Verdict {
        let filters = self.outbound.read();
        let v = if filters.is_empty() {
            Verdict::Accept
        } else {
            evaluate(&filters, env, &self.profile())
        };
        self.count(v, &self.counters.outbound_accepted, &self.counters.outbound_rejected)
    }

    pub fn snapshot(&self) -> GatewaySnapshot {
        let c = &self.counters;
        GatewaySnapshot {
            inbound_accepted: c.inbound_accepted.load(Ordering::Relaxed),
            inbound_rejected: c.inbound_rejected.load(Ordering::Relaxed),
            outbound_accepted: c.outbound_accepted.load(Ordering::Relaxed),
            outbound_rejected: c.outbound_rejected.load(Ordering::Relaxed),
            missing_attr: c.missing_attr.load(Ordering::Relaxed),
        }
    }
}

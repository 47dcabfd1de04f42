use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::Subject;
use crate::model::{MsgId, Pid};

pub const MAX_PAYLOAD_BYTES: usize = 64 * 1024;

/// Scalar attribute value carried next to a payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Num(f64),
    Str(String),
}

impl AttrValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            AttrValue::Num(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            AttrValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Bool(b) => write!(f, "{b}"),
            AttrValue::Num(n) => write!(f, "{n}"),
            AttrValue::Str(s) => f.write_str(s),
        }
    }
}

impl From<bool> for AttrValue {
    fn from(b: bool) -> Self {
        AttrValue::Bool(b)
    }
}

impl From<f64> for AttrValue {
    fn from(n: f64) -> Self {
        AttrValue::Num(n)
    }
}

impl From<&str> for AttrValue {
    fn from(s: &str) -> Self {
        AttrValue::Str(s.to_owned())
    }
}

impl From<String> for AttrValue {
    fn from(s: String) -> Self {
        AttrValue::Str(s)
    }
}

pub type Attrs = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvelopeError {
    #[error("payload is {0} bytes, limit is {MAX_PAYLOAD_BYTES}")]
    TooLarge(usize),
    #[error("attribute key {0:?} is not lowercase")]
    UppercaseKey(String),
    #[error("attribute `kind` is required")]
    MissingKind,
}

/// A routed message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub id: MsgId,
    pub subject: Subject,
    pub sender: Pid,
    pub attrs: Attrs,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    pub sent_at: DateTime<Utc>,
}

impl Envelope {
    pub fn new(subject: Subject, sender: Pid, attrs: Attrs, payload: Vec<u8>) -> Self {
        Envelope {
            id: MsgId::random(),
            subject,
            sender,
            attrs,
            payload,
            sent_at: Utc::now(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvelopeError> {
        if self.payload.len() > MAX_PAYLOAD_BYTES {
            return Err(EnvelopeError::TooLarge(self.payload.len()));
        }
        if let Some(k) = self.attrs.keys().find(|k| k.chars().any(char::is_uppercase)) {
            return Err(EnvelopeError::UppercaseKey(k.clone()));
        }
        if !self.attrs.contains_key("kind") {
            return Err(EnvelopeError::MissingKind);
        }
        Ok(())
    }

    pub fn kind(&self) -> Option<&str> {
        self.attrs.get("kind").and_then(AttrValue::as_str)
    }

    pub fn attr(&self, key: &str) -> Option<&AttrValue> {
        self.attrs.get(key)
    }
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

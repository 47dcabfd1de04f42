//! Identifiers, peer identity and geodesic helpers shared by every layer.

mod geo;
mod ids;

pub use geo::{distance_km, haversine_km, GeoPoint, EARTH_RADIUS_KM};
pub use ids::{
    generate_uuid, mint_pid, mint_tid, DeviceUuid, MsgId, Pid, PidSpace, Tid, UuidGenerator, PID_ALPHABET,
    PID_LEN,
};

use serde::{Deserialize, Serialize};

pub const MAX_NICKNAME_CHARS: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid PID {0:?}")]
    InvalidPid(String),
    #[error("invalid TID {0:?}")]
    InvalidTid(String),
    #[error("invalid device uuid")]
    InvalidUuid(String),
    #[error("invalid id {0:?}")]
    InvalidId(String),
    #[error("device fingerprint must not be empty")]
    EmptyFingerprint,
    #[error("PID namespace exhausted")]
    PidSpaceExhausted,
    #[error("coordinate out of range: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("invalid email {0:?}")]
    InvalidEmail(String),
    #[error("nickname must be 1..=64 characters")]
    InvalidNickname,
}

/// Shape check only: exactly one `@` with non-empty local and domain parts.
pub fn validate_email(email: &str) -> Result<(), ModelError> {
    let mut parts = email.split('@');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(local), Some(domain), None) if !local.is_empty() && !domain.is_empty() && !email.contains(char::is_whitespace) => {
            Ok(())
        }
        _ => Err(ModelError::InvalidEmail(email.to_owned())),
    }
}

pub fn validate_nickname(nickname: &str) -> Result<(), ModelError> {
    let n = nickname.chars().count();
    if n == 0 || n > MAX_NICKNAME_CHARS || nickname.trim().is_empty() {
        Err(ModelError::InvalidNickname)
    } else {
        Ok(())
    }
}

/// Everything a peer knows about itself. The uuid never leaves the
/// peer/broker pair, so it is skipped when serializing for other peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerIdentity {
    pub uuid: DeviceUuid,
    pub pid: Pid,
    pub nickname: String,
    pub email: String,
}

impl PeerIdentity {
    pub fn new(uuid: DeviceUuid, pid: Pid, nickname: String, email: String) -> Result<Self, ModelError> {
        validate_email(&email)?;
        validate_nickname(&nickname)?;
        Ok(PeerIdentity { uuid, pid, nickname, email })
    }

    /// The part of the identity that may be shown to other peers.
    pub fn public(&self) -> PublicIdentity {
        PublicIdentity {
            pid: self.pid.clone(),
            nickname: self.nickname.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicIdentity {
    pub pid: Pid,
    pub nickname: String,
}

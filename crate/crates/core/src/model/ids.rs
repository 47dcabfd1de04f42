use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;

/// Crockford base32 symbols (no I, L, O, U).
pub const PID_ALPHABET: &[u8; 32] = b"0123456789ABCDEFGHJKMNPQRSTVWXYZ";
pub const PID_LEN: usize = 6;

const RANDOM_MINT_ATTEMPTS: usize = 64;

/// Permanent peer id: six Crockford base32 symbols, minted once at registration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pid(String);

impl Pid {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for Pid {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == PID_LEN && s.bytes().all(|b| PID_ALPHABET.contains(&b)) {
            Ok(Pid(s.to_owned()))
        } else {
            Err(ModelError::InvalidPid(s.to_owned()))
        }
    }
}

impl TryFrom<String> for Pid {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Pid> for String {
    fn from(p: Pid) -> String {
        p.0
    }
}

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A fixed-length id namespace over an arbitrary symbol alphabet.
///
/// The production namespace is [`PidSpace::CROCKFORD`]; smaller spaces exist
/// so exhaustion behaviour can be exercised in tests.
#[derive(Debug, Clone, Copy)]
pub struct PidSpace<'a> {
    alphabet: &'a [u8],
    len: usize,
}

impl<'a> PidSpace<'a> {
    pub const CROCKFORD: PidSpace<'static> = PidSpace {
        alphabet: PID_ALPHABET,
        len: PID_LEN,
    };

    pub fn new(alphabet: &'a [u8], len: usize) -> Self {
        assert!(!alphabet.is_empty() && len > 0, "empty id namespace");
        PidSpace { alphabet, len }
    }

    /// Number of distinct ids, saturating at `u64::MAX`.
    pub fn size(&self) -> u64 {
        (self.alphabet.len() as u64).saturating_pow(self.len as u32)
    }

    fn render(&self, mut index: u64) -> String {
        let base = self.alphabet.len() as u64;
        let mut out = vec![self.alphabet[0]; self.len];
        for slot in out.iter_mut().rev() {
            *slot = self.alphabet[(index % base) as usize];
            index /= base;
        }
        String::from_utf8(out).expect("alphabet is ascii")
    }

    /// Mint an id not contained in `taken`.
    ///
    /// Random draws first; when the namespace is crowded, falls back to a
    /// linear scan from a random offset so a free id is always found if one
    /// exists.
    pub fn mint<R: Rng + ?Sized>(
        &self,
        taken: &HashSet<String>,
        rng: &mut R,
    ) -> Result<String, ModelError> {
        let size = self.size();
        if taken.len() as u64 >= size {
            return Err(ModelError::PidSpaceExhausted);
        }
        for _ in 0..RANDOM_MINT_ATTEMPTS {
            let candidate = self.render(rng.random_range(0..size));
            if !taken.contains(&candidate) {
                return Ok(candidate);
            }
        }
        let start = rng.random_range(0..size);
        (0..size)
            .map(|i| self.render((start + i) % size))
            .find(|c| !taken.contains(c))
            .ok_or(ModelError::PidSpaceExhausted)
    }
}

pub fn mint_pid<R: Rng + ?Sized>(taken: &HashSet<String>, rng: &mut R) -> Result<Pid, ModelError> {
    PidSpace::CROCKFORD.mint(taken, rng).map(Pid)
}

/// Per-session id, regenerated at every login.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Tid(u128);

impl Tid {
    pub fn from_u128(v: u128) -> Self {
        Tid(v)
    }
}

pub fn mint_tid<R: Rng + ?Sized>(rng: &mut R) -> Tid {
    Tid(rng.random())
}

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for Tid {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex128(s).map(Tid).ok_or_else(|| ModelError::InvalidTid(s.to_owned()))
    }
}

impl TryFrom<String> for Tid {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Tid> for String {
    fn from(t: Tid) -> String {
        t.to_string()
    }
}

/// Device-bound 128-bit secret. Only ever sent to the broker.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DeviceUuid(u128);

impl DeviceUuid {
    pub fn from_u128(v: u128) -> Self {
        DeviceUuid(v)
    }

    pub fn as_u128(&self) -> u128 {
        self.0
    }
}

// Keep the secret out of logs.
impl fmt::Debug for DeviceUuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DeviceUuid(..)")
    }
}

impl fmt::Display for DeviceUuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for DeviceUuid {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex128(s)
            .map(DeviceUuid)
            .ok_or_else(|| ModelError::InvalidUuid(s.to_owned()))
    }
}

impl TryFrom<String> for DeviceUuid {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DeviceUuid> for String {
    fn from(u: DeviceUuid) -> String {
        u.to_string()
    }
}

/// Derives device tokens from a fingerprint and a timestamp under a salt.
///
/// The salt is drawn once per process by [`UuidGenerator::new`]; tests pin it
/// with [`UuidGenerator::with_salt`] to get reproducible tokens.
#[derive(Clone)]
pub struct UuidGenerator {
    salt: [u8; 16],
}

impl UuidGenerator {
    pub fn new() -> Self {
        UuidGenerator {
            salt: rand::rng().random(),
        }
    }

    pub fn with_salt(salt: [u8; 16]) -> Self {
        UuidGenerator { salt }
    }

    pub fn generate(&self, fingerprint: &[u8], now: DateTime<Utc>) -> Result<DeviceUuid, ModelError> {
        if fingerprint.is_empty() {
            return Err(ModelError::EmptyFingerprint);
        }
        let mut h = Sha256::new();
        h.update(self.salt);
        h.update((fingerprint.len() as u64).to_be_bytes());
        h.update(fingerprint);
        h.update(now.timestamp().to_be_bytes());
        h.update(now.timestamp_subsec_nanos().to_be_bytes());
        let digest = h.finalize();
        let mut head = [0u8; 16];
        head.copy_from_slice(&digest[..16]);
        Ok(DeviceUuid(u128::from_be_bytes(head)))
    }
}

impl Default for UuidGenerator {
    fn default() -> Self {
        Self::new()
    }
}

pub fn generate_uuid(
    generator: &UuidGenerator,
    device_fingerprint: &[u8],
    now: DateTime<Utc>,
) -> Result<DeviceUuid, ModelError> {
    generator.generate(device_fingerprint, now)
}

/// 128-bit message / record id rendered as 32 lowercase hex chars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MsgId(u128);

impl MsgId {
    pub fn random() -> Self {
        MsgId(rand::rng().random())
    }

    pub fn from_u128(v: u128) -> Self {
        MsgId(v)
    }

    pub fn as_u128(&self) -> u128 {
        self.0
    }
}

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for MsgId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex128(s).map(MsgId).ok_or_else(|| ModelError::InvalidId(s.to_owned()))
    }
}

impl TryFrom<String> for MsgId {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MsgId> for String {
    fn from(m: MsgId) -> String {
        m.to_string()
    }
}

fn parse_hex128(s: &str) -> Option<u128> {
    if s.len() != 32 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    u128::from_str_radix(s, 16).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 5, 27, 0, 0, 0).unwrap()
    }

    #[test]
    fn uuid_is_deterministic_per_input() {
        let g = UuidGenerator::with_salt([7; 16]);
        let a = g.generate(b"deviceA", t0()).unwrap();
        assert_eq!(a, g.generate(b"deviceA", t0()).unwrap());
        assert_ne!(a, g.generate(b"deviceB", t0()).unwrap());
        let later = t0() + chrono::Duration::seconds(1);
        assert_ne!(a, g.generate(b"deviceA", later).unwrap());
    }

    #[test]
    fn uuid_rejects_empty_fingerprint() {
        let g = UuidGenerator::new();
        assert!(matches!(g.generate(b"", t0()), Err(ModelError::EmptyFingerprint)));
    }

    #[test]
    fn uuid_depends_on_salt() {
        let a = UuidGenerator::with_salt([1; 16]).generate(b"d", t0()).unwrap();
        let b = UuidGenerator::with_salt([2; 16]).generate(b"d", t0()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn minted_pid_is_valid() {
        let pid = mint_pid(&HashSet::new(), &mut rand::rng()).unwrap();
        assert_eq!(pid.as_str().len(), 6);
        assert_eq!(pid.as_str().parse::<Pid>().unwrap(), pid);
    }

    #[test]
    fn reduced_namespace_returns_last_free_id() {
        let space = PidSpace::new(b"AB", 1);
        let taken: HashSet<String> = ["B".to_string()].into();
        assert_eq!(space.mint(&taken, &mut rand::rng()).unwrap(), "A");

        // Six symbols over {A,B}: everything but AAAAAA taken.
        let space = PidSpace::new(b"AB", 6);
        let taken: HashSet<String> = (0..64u64).map(|i| space.render(i)).filter(|s| s != "AAAAAA").collect();
        assert_eq!(taken.len(), 63);
        assert_eq!(space.mint(&taken, &mut rand::rng()).unwrap(), "AAAAAA");
    }

    #[test]
    fn exhausted_namespace_errors() {
        let space = PidSpace::new(b"AB", 2);
        let taken: HashSet<String> = ["AA", "AB", "BA", "BB"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(space.mint(&taken, &mut rand::rng()), Err(ModelError::PidSpaceExhausted)));
    }

    #[test]
    fn ten_thousand_mints_are_distinct() {
        let mut rng = StdRng::seed_from_u64(42);
        let mut taken = HashSet::new();
        for _ in 0..10_000 {
            let pid = mint_pid(&taken, &mut rng).unwrap();
            assert!(taken.insert(pid.0));
        }
        assert_eq!(taken.len(), 10_000);
    }

    #[test]
    fn tids_are_32_hex_and_unique() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = mint_tid(&mut rng);
        let b = mint_tid(&mut rng);
        assert_ne!(a, b);
        let s = a.to_string();
        assert_eq!(s.len(), 32);
        assert!(s.bytes().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(s.parse::<Tid>().unwrap(), a);
    }

    #[test]
    fn million_tids_no_duplicates() {
        let mut rng = StdRng::seed_from_u64(99);
        let mut seen = HashSet::with_capacity(1_000_000);
        for _ in 0..1_000_000 {
            assert!(seen.insert(mint_tid(&mut rng)));
        }
    }

    #[test]
    fn pid_parse_rejects_bad_symbols() {
        for bad in ["ABCDE", "ABCDEFG", "ABCDEI", "abcdef", "ABCDE-"] {
            assert!(bad.parse::<Pid>().is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn pid_round_trips(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let pid = mint_pid(&HashSet::new(), &mut rng).unwrap();
            let text = pid.to_string();
            prop_assert_eq!(text.parse::<Pid>().unwrap(), pid.clone());
            let json = serde_json::to_string(&pid).unwrap();
            prop_assert_eq!(serde_json::from_str::<Pid>(&json).unwrap(), pid);
        }

        #[test]
        fn mint_avoids_taken(mask in proptest::collection::vec(any::<bool>(), 27), seed in any::<u64>()) {
            // Reduced namespace {A,B,C}^3 = 27 ids.
            let space = PidSpace::new(b"ABC", 3);
            let taken: HashSet<String> = mask.iter().enumerate()
                .filter(|(_, t)| **t)
                .map(|(i, _)| space.render(i as u64))
                .collect();
            let mut rng = StdRng::seed_from_u64(seed);
            match space.mint(&taken, &mut rng) {
                Ok(id) => {
                    prop_assert!(!taken.contains(&id));
                    prop_assert_eq!(id.len(), 3);
                }
                Err(_) => prop_assert_eq!(taken.len(), 27),
            }
        }
    }
}

//! Byte formats used on a P2P link.
//!
//! Every link carries discrete messages. Over TCP each message is a
//! big-endian `u32` length followed by the body; over the broker relay one
//! RELAY frame carries one message. A message is either a 40-byte probe or a
//! data-channel frame (tag byte followed by the body).

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use super::SessionId;

pub const PROBE_LEN: usize = 40;
const MAGIC: [u8; 15] = *b"SERVICENET-PRB1";

pub const FLAG_ECHO: u8 = 0x01;
pub const FLAG_NOMINATE: u8 = 0x02;

/// Largest message accepted from a TCP link.
pub const MAX_MESSAGE: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub flags: u8,
    pub session: SessionId,
    pub nonce: u64,
}

impl Probe {
    pub fn new(session: SessionId, nonce: u64) -> Self {
        Probe { flags: 0, session, nonce }
    }

    pub fn nominating(mut self) -> Self {
        self.flags |= FLAG_NOMINATE;
        self
    }

    /// The reflected probe: same bytes, echo bit set.
    pub fn echo(mut self) -> Self {
        self.flags |= FLAG_ECHO;
        self
    }

    pub fn is_echo(&self) -> bool {
        self.flags & FLAG_ECHO != 0
    }

    pub fn is_nomination(&self) -> bool {
        self.flags & FLAG_NOMINATE != 0
    }

    /// Whether `other` is the echo of this probe.
    pub fn answered_by(&self, other: &Probe) -> bool {
        other.is_echo() && other.session == self.session && other.nonce == self.nonce && !self.is_echo()
    }

    pub fn encode(&self) -> [u8; PROBE_LEN] {
        let mut out = [0u8; PROBE_LEN];
        out[..15].copy_from_slice(&MAGIC);
        out[15] = self.flags;
        out[16..32].copy_from_slice(&self.session.as_u128().to_be_bytes());
        out[32..].copy_from_slice(&self.nonce.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Probe> {
        if bytes.len() != PROBE_LEN || bytes[..15] != MAGIC {
            return None;
        }
        Some(Probe {
            flags: bytes[15],
            session: SessionId::from_u128(u128::from_be_bytes(bytes[16..32].try_into().ok()?)),
            nonce: u64::from_be_bytes(bytes[32..].try_into().ok()?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    Data = 1,
    ChatDigest = 2,
    ChatRecords = 3,
    Close = 4,
}

impl Tag {
    pub fn from_byte(b: u8) -> Option<Tag> {
        match b {
            1 => Some(Tag::Data),
            2 => Some(Tag::ChatDigest),
            3 => Some(Tag::ChatRecords),
            4 => Some(Tag::Close),
            _ => None,
        }
    }
}

pub fn encode_frame(tag: Tag, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 1);
    out.push(tag as u8);
    out.extend_from_slice(body);
    out
}

pub fn decode_frame(msg: &[u8]) -> Option<(Tag, &[u8])> {
    let (first, rest) = msg.split_first()?;
    Some((Tag::from_byte(*first)?, rest))
}

pub async fn write_msg<W: AsyncWrite + Unpin>(w: &mut W, body: &[u8]) -> std::io::Result<()> {
    if body.len() > MAX_MESSAGE {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "message too large"));
    }
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf).await?;
    w.flush().await
}

/// `Ok(None)` on clean end of stream.
pub async fn read_msg<R: AsyncRead + Unpin>(r: &mut R) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_MESSAGE {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "message too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_round_trip_and_echo() {
        let p = Probe::new(SessionId::from_u128(0xabc), 42);
        let bytes = p.encode();
        assert_eq!(bytes.len(), PROBE_LEN);
        assert_eq!(Probe::decode(&bytes), Some(p));
        let e = p.echo();
        let eb = e.encode();
        // Echo differs from the probe only in the flag byte.
        assert_eq!(bytes[..15], eb[..15]);
        assert_eq!(bytes[16..], eb[16..]);
        assert!(p.answered_by(&Probe::decode(&eb).unwrap()));
        assert!(!p.answered_by(&Probe::new(SessionId::from_u128(0xabc), 43).echo()));
        assert_eq!(Probe::decode(&bytes[..39]), None);
        assert_eq!(Probe::decode(&encode_frame(Tag::Data, &[0; 39])), None);
    }

    #[tokio::test]
    async fn framing_round_trip() {
        let (mut a, mut b) = tokio::io::duplex(64);
        let writer = tokio::spawn(async move {
            for i in 0..50u32 {
                write_msg(&mut a, &encode_frame(Tag::Data, &i.to_be_bytes())).await.unwrap();
            }
        });
        for i in 0..50u32 {
            let m = read_msg(&mut b).await.unwrap().unwrap();
            let (tag, body) = decode_frame(&m).unwrap();
            assert_eq!(tag, Tag::Data);
            assert_eq!(body, i.to_be_bytes());
        }
        writer.await.unwrap();
        assert_eq!(read_msg(&mut b).await.unwrap(), None);
    }
}

//! Message framing.
//!
//! Every frame is `payload length (u32 BE) | msg type (u8) | tag (u32 BE) |
//! payload`. Payloads are capped at 64 MiB.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const MAX_PAYLOAD: usize = 64 << 20;
pub const HEADER_LEN: usize = 9;
/// "NASF"
pub const MAGIC: u32 = 0x4E41_5346;
pub const PROTOCOL_VERSION: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    RankAssign = 2,
    Barrier = 3,
    Bcast = 4,
    Allreduce = 5,
    Gather = 6,
    Task = 7,
    Result = 8,
    Log = 9,
    Shutdown = 10,
}

impl MsgType {
    pub const ALL: [MsgType; 10] = [
        MsgType::Hello,
        MsgType::RankAssign,
        MsgType::Barrier,
        MsgType::Bcast,
        MsgType::Allreduce,
        MsgType::Gather,
        MsgType::Task,
        MsgType::Result,
        MsgType::Log,
        MsgType::Shutdown,
    ];

    pub fn from_byte(b: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| *t as u8 == b)
            .ok_or_else(|| Error::Protocol(format!("unknown message type byte {b:#04x}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub tag: u32,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(msg_type: MsgType, tag: u32, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            tag,
            payload,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        check_len(self.payload.len())?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.tag.to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Decodes one frame from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Protocol(format!(
                "frame header needs {HEADER_LEN} bytes, have {}",
                bytes.len()
            )));
        }
        let (len, msg_type, tag) = parse_header(bytes[..HEADER_LEN].try_into().expect("sized"))?;
        let end = HEADER_LEN + len;
        if bytes.len() < end {
            return Err(Error::Protocol(format!(
                "frame declares {len} payload bytes, have {}",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok((
            Self::new(msg_type, tag, bytes[HEADER_LEN..end].to_vec()),
            end,
        ))
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let bytes = self
            .encode()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        w.write_all(&bytes)?;
        w.flush()
    }

    /// Reads exactly one frame. I/O errors are returned untouched so callers
    /// can tell timeouts from disconnects.
    pub fn read_from(r: &mut impl Read) -> io::Result<Result<Self>> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let (len, msg_type, tag) = match parse_header(&header) {
            Ok(h) => h,
            Err(e) => return Ok(Err(e)),
        };
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Ok(Ok(Self::new(msg_type, tag, payload)))
    }
}

fn check_len(len: usize) -> Result<()> {
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!(
            "payload of {len} bytes exceeds the {MAX_PAYLOAD}-byte cap"
        )));
    }
    Ok(())
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(usize, MsgType, u32)> {
    let len = u32::from_be_bytes(h[0..4].try_into().expect("sized")) as usize;
    check_len(len)?;
    let msg_type = MsgType::from_byte(h[4])?;
    let tag = u32::from_be_bytes(h[5..9].try_into().expect("sized"));
    Ok((len, msg_type, tag))
}

/// `count (u32 LE) | count x f64 LE`.
pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * values.len());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 4 {
        return Err(Error::Protocol("real vector missing its count".into()));
    }
    let count = u32::from_le_bytes(bytes[..4].try_into().expect("sized")) as usize;
    let body = &bytes[4..];
    if body.len() != count * 8 {
        return Err(Error::Protocol(format!(
            "real vector declares {count} values but carries {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("sized")))
        .collect())
}

/// `count (u32 LE) | (len (u32 LE) | bytes) per item`.
pub fn encode_byte_list(items: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for item in items {
        out.extend_from_slice(&(item.len() as u32).to_le_bytes());
        out.extend_from_slice(item);
    }
    out
}

pub fn decode_byte_list(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let bad = || Error::Protocol("truncated byte list".into());
    let read_u32 = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("sized")) as usize)
            .ok_or_else(bad)
    };
    let count = read_u32(0)?;
    let mut at = 4;
    let mut items = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(at)?;
        at += 4;
        items.push(bytes.get(at..at + len).ok_or_else(bad)?.to_vec());
        at += len;
    }
    if at != bytes.len() {
        return Err(Error::Protocol("trailing bytes after byte list".into()));
    }
    Ok(items)
}

pub fn hello_payload(version: u8) -> Vec<u8> {
    let mut p = MAGIC.to_be_bytes().to_vec();
    p.push(version);
    p
}

pub(crate) fn check_hello(payload: &[u8]) -> Result<()> {
    if payload.len() != 5 {
        return Err(Error::Protocol(format!(
            "HELLO payload must be 5 bytes, got {}",
            payload.len()
        )));
    }
    let magic = u32::from_be_bytes(payload[..4].try_into().expect("sized"));
    if magic != MAGIC {
        return Err(Error::Protocol(format!("bad magic {magic:#010x} in HELLO")));
    }
    if payload[4] != PROTOCOL_VERSION {
        return Err(Error::Protocol(format!(
            "peer speaks protocol version {}, expected {PROTOCOL_VERSION}",
            payload[4]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let env = Envelope::new(MsgType::Gather, 0x0102_0304, vec![0xAA, 0xBB]);
        assert_eq!(
            env.encode().unwrap(),
            vec![0, 0, 0, 2, 6, 1, 2, 3, 4, 0xAA, 0xBB]
        );
    }

    #[test]
    fn hello_bytes() {
        assert_eq!(hello_payload(1), vec![0x4E, 0x41, 0x53, 0x46, 0x01]);
        assert!(check_hello(&hello_payload(1)).is_ok());
        assert!(matches!(
            check_hello(&hello_payload(2)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn oversized_payload_rejected() {
        let mut frame = vec![0u8; HEADER_LEN];
        frame[..4].copy_from_slice(&((MAX_PAYLOAD + 1) as u32).to_be_bytes());
        frame[4] = 1;
        assert!(matches!(Envelope::decode(&frame), Err(Error::Protocol(_))));
    }

    #[test]
    fn unknown_type_rejected() {
        assert!(MsgType::from_byte(0).is_err());
        assert!(MsgType::from_byte(11).is_err());
    }

    #[test]
    fn nan_survives_bit_exactly() {
        let weird = f64::from_bits(0x7FF8_0000_DEAD_BEEF);
        let back = decode_f64s(&encode_f64s(&[weird, -0.0, 1.5])).unwrap();
        assert_eq!(back[0].to_bits(), weird.to_bits());
        assert_eq!(back[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn byte_list_round_trip() {
        let items = vec![vec![], vec![1, 2, 3], vec![9]];
        assert_eq!(decode_byte_list(&encode_byte_list(&items)).unwrap(), items);
        assert!(decode_byte_list(&[1, 0, 0, 0, 5, 0, 0, 0, 1]).is_err());
    }
}

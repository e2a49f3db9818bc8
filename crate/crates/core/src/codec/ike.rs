//! Simplified IKEv2 message framing.
//!
//! ```text
//!  0        1        2        3 .. 10    11 .. 18   19
//! +--------+--------+--------+----------+----------+--------+
//! | 0x20   | xchg   | flags  |  spi_i   |  spi_r   | nsegs  |
//! +--------+--------+--------+----------+----------+--------+
//! then nsegs times:  | tag (1) | len (2, BE) | value (len) |
//! ```
//!
//! `xchg` is 34 for SA_INIT and 35 for AUTH. Flag bit 0x08 marks a message
//! sent by the initiator, 0x20 a message sent by the responder.

use super::CodecError;

pub const IKE_HEADER_LEN: usize = 20;
const VERSION: u8 = 0x20;
const FLAG_INITIATOR: u8 = 0x08;
const FLAG_RESPONSE: u8 = 0x20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExchangeType {
    SaInit,
    Auth,
}

impl ExchangeType {
    fn to_byte(self) -> u8 {
        match self {
            ExchangeType::SaInit => 34,
            ExchangeType::Auth => 35,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            34 => Some(ExchangeType::SaInit),
            35 => Some(ExchangeType::Auth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IkeRole {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentTag {
    Proposal,
    Ke,
    Nonce,
    Id,
    Auth,
    SaChild,
    Tsi,
    Tsr,
}

impl SegmentTag {
    fn to_byte(self) -> u8 {
        match self {
            SegmentTag::Proposal => 1,
            SegmentTag::Ke => 2,
            SegmentTag::Nonce => 3,
            SegmentTag::Id => 4,
            SegmentTag::Auth => 5,
            SegmentTag::SaChild => 6,
            SegmentTag::Tsi => 7,
            SegmentTag::Tsr => 8,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => SegmentTag::Proposal,
            2 => SegmentTag::Ke,
            3 => SegmentTag::Nonce,
            4 => SegmentTag::Id,
            5 => SegmentTag::Auth,
            6 => SegmentTag::SaChild,
            7 => SegmentTag::Tsi,
            8 => SegmentTag::Tsr,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IkePayload {
    pub exchange_type: ExchangeType,
    /// Role of the sender.
    pub role: IkeRole,
    pub spi_i: [u8; 8],
    pub spi_r: [u8; 8],
    pub body: Vec<(SegmentTag, Vec<u8>)>,
}

impl IkePayload {
    pub fn segment(&self, tag: SegmentTag) -> Option<&[u8]> {
        self.body
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, v)| v.as_slice())
    }

    fn check(&self) -> Result<(), CodecError> {
        let auth_count = self
            .body
            .iter()
            .filter(|(t, _)| *t == SegmentTag::Auth)
            .count();
        match self.exchange_type {
            ExchangeType::SaInit if auth_count != 0 => {
                return Err(CodecError::IllegalSegment("auth segment inside SA_INIT"))
            }
            ExchangeType::Auth if auth_count != 1 => {
                return Err(CodecError::IllegalSegment(
                    "AUTH message needs exactly one auth segment",
                ))
            }
            _ => {}
        }
        if self.spi_i == [0; 8] {
            return Err(CodecError::Invalid("zero initiator spi"));
        }
        let first_request =
            self.exchange_type == ExchangeType::SaInit && self.role == IkeRole::Initiator;
        if first_request != (self.spi_r == [0; 8]) {
            return Err(CodecError::Invalid(
                "responder spi must be zero exactly in the first SA_INIT request",
            ));
        }
        if self.body.len() > u8::MAX as usize {
            return Err(CodecError::Invalid("too many segments"));
        }
        if self.body.iter().any(|(_, v)| v.len() > u16::MAX as usize) {
            return Err(CodecError::Invalid("segment too long"));
        }
        Ok(())
    }
}

pub fn frame_ike(p: &IkePayload) -> Result<Vec<u8>, CodecError> {
    p.check()?;
    let mut out = Vec::with_capacity(
        IKE_HEADER_LEN + p.body.iter().map(|(_, v)| 3 + v.len()).sum::<usize>(),
    );
    out.push(VERSION);
    out.push(p.exchange_type.to_byte());
    out.push(match p.role {
        IkeRole::Initiator => FLAG_INITIATOR,
        IkeRole::Responder => FLAG_RESPONSE,
    });
    out.extend_from_slice(&p.spi_i);
    out.extend_from_slice(&p.spi_r);
    out.push(p.body.len() as u8);
    for (tag, value) in &p.body {
        out.push(tag.to_byte());
        out.extend_from_slice(&(value.len() as u16).to_be_bytes());
        out.extend_from_slice(value);
    }
    Ok(out)
}

pub fn parse_ike(b: &[u8]) -> Result<IkePayload, CodecError> {
    if b.len() < IKE_HEADER_LEN {
        return Err(CodecError::Malformed("IKE message shorter than header"));
    }
    if b[0] != VERSION {
        return Err(CodecError::Malformed("unknown IKE version"));
    }
    let exchange_type =
        ExchangeType::from_byte(b[1]).ok_or(CodecError::Malformed("unknown exchange type"))?;
    let role = match b[2] {
        FLAG_INITIATOR => IkeRole::Initiator,
        FLAG_RESPONSE => IkeRole::Responder,
        _ => return Err(CodecError::Malformed("bad IKE flags")),
    };
    let spi_i: [u8; 8] = b[3..11].try_into().expect("8 bytes");
    let spi_r: [u8; 8] = b[11..19].try_into().expect("8 bytes");
    let count = b[19] as usize;
    let mut pos = IKE_HEADER_LEN;
    let mut body = Vec::with_capacity(count);
    for _ in 0..count {
        if b.len() < pos + 3 {
            return Err(CodecError::Malformed("truncated segment header"));
        }
        let tag = SegmentTag::from_byte(b[pos]).ok_or(CodecError::Malformed("unknown segment"))?;
        let len = u16::from_be_bytes([b[pos + 1], b[pos + 2]]) as usize;
        pos += 3;
        if b.len() < pos + len {
            return Err(CodecError::Malformed("truncated segment"));
        }
        body.push((tag, b[pos..pos + len].to_vec()));
        pos += len;
    }
    if pos != b.len() {
        return Err(CodecError::TrailingBytes(b.len() - pos));
    }
    let p = IkePayload {
        exchange_type,
        role,
        spi_i,
        spi_r,
        body,
    };
    p.check().map_err(|e| match e {
        CodecError::Invalid(m) => CodecError::Malformed(m),
        other => other,
    })?;
    Ok(p)
}

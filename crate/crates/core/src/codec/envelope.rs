//! CoAP-lite message framing.
//!
//! ```text
//!  0        1        2        3        4        5
//! +--------+--------+--------+--------+--------+--------+
//! |  kind  |  code  |   message id    | payload length  |
//! +--------+--------+--------+--------+--------+--------+
//! | path len | uri path (path len bytes) | payload ...   |
//! +----------+---------------------------+---------------+
//! ```
//!
//! All integers are big-endian. Responses carry an empty path (path len 0).

use super::CodecError;

pub const HEADER_LEN: usize = 6;
pub const MAX_PATH_LEN: usize = u8::MAX as usize;
pub const MAX_PAYLOAD_LEN: usize = u16::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Request,
    Response,
}

/// Method or response code, encoded with CoAP's `class.detail` byte layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Code {
    Get,
    Post,
    Created,
    Content,
    BadRequest,
    Unauthorized,
    Conflict,
}

impl Code {
    pub fn to_byte(self) -> u8 {
        match self {
            Code::Get => 0x01,
            Code::Post => 0x02,
            Code::Created => 0x41,
            Code::Content => 0x45,
            Code::BadRequest => 0x80,
            Code::Unauthorized => 0x81,
            Code::Conflict => 0x89,
        }
    }

    pub fn from_byte(b: u8) -> Option<Code> {
        Some(match b {
            0x01 => Code::Get,
            0x02 => Code::Post,
            0x41 => Code::Created,
            0x45 => Code::Content,
            0x80 => Code::BadRequest,
            0x81 => Code::Unauthorized,
            0x89 => Code::Conflict,
            _ => return None,
        })
    }

    pub fn is_method(self) -> bool {
        matches!(self, Code::Get | Code::Post)
    }

    pub fn is_success(self) -> bool {
        matches!(self, Code::Created | Code::Content)
    }
}

impl std::fmt::Display for Code {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Code::Get => "GET",
            Code::Post => "POST",
            Code::Created => "2.01 Created",
            Code::Content => "2.05 Content",
            Code::BadRequest => "4.00 Bad Request",
            Code::Unauthorized => "4.01 Unauthorized",
            Code::Conflict => "4.09 Conflict",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: Kind,
    pub code: Code,
    pub uri_path: String,
    pub message_id: u16,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn request(code: Code, uri_path: impl Into<String>, message_id: u16, payload: Vec<u8>) -> Self {
        Envelope {
            kind: Kind::Request,
            code,
            uri_path: uri_path.into(),
            message_id,
            payload,
        }
    }

    /// Builds the response to `req`, copying its message id.
    pub fn response_to(req: &Envelope, code: Code, payload: Vec<u8>) -> Self {
        Envelope {
            kind: Kind::Response,
            code,
            uri_path: String::new(),
            message_id: req.message_id,
            payload,
        }
    }

    pub fn is_request(&self) -> bool {
        self.kind == Kind::Request
    }

    fn check(&self) -> Result<(), CodecError> {
        match self.kind {
            Kind::Request => {
                if !self.code.is_method() {
                    return Err(CodecError::Invalid("request carries a response code"));
                }
                if self.uri_path.is_empty() {
                    return Err(CodecError::Invalid("request without uri path"));
                }
            }
            Kind::Response => {
                if self.code.is_method() {
                    return Err(CodecError::Invalid("response carries a method code"));
                }
                if !self.uri_path.is_empty() {
                    return Err(CodecError::Invalid("response with uri path"));
                }
            }
        }
        if self.uri_path.len() > MAX_PATH_LEN {
            return Err(CodecError::Invalid("uri path too long"));
        }
        if self.payload.len() > MAX_PAYLOAD_LEN {
            return Err(CodecError::Invalid("payload too long"));
        }
        Ok(())
    }

    pub fn framed_len(&self) -> usize {
        HEADER_LEN + 1 + self.uri_path.len() + self.payload.len()
    }
}

pub fn frame_envelope(e: &Envelope) -> Result<Vec<u8>, CodecError> {
    e.check()?;
    let mut out = Vec::with_capacity(e.framed_len());
    out.push(match e.kind {
        Kind::Request => 0,
        Kind::Response => 1,
    });
    out.push(e.code.to_byte());
    out.extend_from_slice(&e.message_id.to_be_bytes());
    out.extend_from_slice(&(e.payload.len() as u16).to_be_bytes());
    out.push(e.uri_path.len() as u8);
    out.extend_from_slice(e.uri_path.as_bytes());
    out.extend_from_slice(&e.payload);
    Ok(out)
}

pub fn parse_envelope(b: &[u8]) -> Result<Envelope, CodecError> {
    if b.len() < HEADER_LEN + 1 {
        return Err(CodecError::Malformed("envelope shorter than header"));
    }
    let kind = match b[0] {
        0 => Kind::Request,
        1 => Kind::Response,
        _ => return Err(CodecError::Malformed("unknown envelope kind")),
    };
    let code = Code::from_byte(b[1]).ok_or(CodecError::Malformed("unknown code"))?;
    let message_id = u16::from_be_bytes([b[2], b[3]]);
    let payload_len = u16::from_be_bytes([b[4], b[5]]) as usize;
    let path_len = b[6] as usize;
    let path_end = HEADER_LEN + 1 + path_len;
    if b.len() != path_end + payload_len {
        return Err(CodecError::Malformed("envelope length mismatch"));
    }
    let uri_path = std::str::from_utf8(&b[HEADER_LEN + 1..path_end])
        .map_err(|_| CodecError::Malformed("uri path is not utf-8"))?
        .to_owned();
    let e = Envelope {
        kind,
        code,
        uri_path,
        message_id,
        payload: b[path_end..].to_vec(),
    };
    e.check().map_err(|err| match err {
        CodecError::Invalid(m) => CodecError::Malformed(m),
        other => other,
    })?;
    Ok(e)
}

//! Wire encodings: a canonical CBOR subset, CoAP-lite envelopes and IKE
//! message framing. All functions here are pure.

pub mod cbor;
pub mod envelope;
pub mod ike;

use thiserror::Error;

pub use cbor::{decode_cbor, encode_cbor, CborValue};
pub use envelope::{frame_envelope, parse_envelope, Code, Envelope, Kind};
pub use ike::{frame_ike, parse_ike, ExchangeType, IkePayload, IkeRole, SegmentTag};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed input: {0}")]
    Malformed(&'static str),
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("duplicate map key {0:?}")]
    DuplicateKey(String),
    #[error("illegal segment: {0}")]
    IllegalSegment(&'static str),
    #[error("value violates framing invariant: {0}")]
    Invalid(&'static str),
}

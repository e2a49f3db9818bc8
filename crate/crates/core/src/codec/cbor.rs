//! Canonical encoder/decoder for the CBOR subset used on the wire.
//!
//! Supported major types: 0 (unsigned), 2 (byte string), 3 (text string),
//! 4 (array) and 5 (map with text keys). Floats, tags, negative integers,
//! simple values and indefinite lengths are rejected.
//!
//! Canonical form: every head uses the shortest encoding and map entries are
//! ordered by the bytewise order of their encoded keys. The decoder rejects
//! anything that is not in canonical form, so every accepted byte string has
//! exactly one meaning.

use std::cmp::Ordering;

use super::CodecError;

const MAJOR_UNSIGNED: u8 = 0;
const MAJOR_BYTES: u8 = 2;
const MAJOR_TEXT: u8 = 3;
const MAJOR_ARRAY: u8 = 4;
const MAJOR_MAP: u8 = 5;

/// Nesting limit for decoding; the claim sets never go deeper than 4.
const MAX_DEPTH: usize = 32;

/// A value in the supported CBOR subset.
///
/// Maps keep their entries as a list so that duplicate keys can be detected
/// at encode time. Equality ignores map entry order.
#[derive(Debug, Clone, Eq)]
pub enum CborValue {
    Unsigned(u64),
    Bytes(Vec<u8>),
    Text(String),
    Array(Vec<CborValue>),
    Map(Vec<(String, CborValue)>),
}

impl CborValue {
    pub fn text(s: impl Into<String>) -> Self {
        CborValue::Text(s.into())
    }

    pub fn bytes(b: impl Into<Vec<u8>>) -> Self {
        CborValue::Bytes(b.into())
    }

    pub fn as_u64(&self) -> Option<u64> {
        match self {
            CborValue::Unsigned(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            CborValue::Bytes(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            CborValue::Text(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[CborValue]> {
        match self {
            CborValue::Array(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&[(String, CborValue)]> {
        match self {
            CborValue::Map(v) => Some(v),
            _ => None,
        }
    }

    /// Looks up `key` in a map value. Returns `None` for non-maps.
    pub fn get(&self, key: &str) -> Option<&CborValue> {
        self.as_map()?
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
    }

    /// Returns a copy with every map (recursively) in canonical entry order.
    pub fn canonicalized(&self) -> CborValue {
        match self {
            CborValue::Array(items) => {
                CborValue::Array(items.iter().map(CborValue::canonicalized).collect())
            }
            CborValue::Map(entries) => {
                let mut sorted: Vec<(String, CborValue)> = entries
                    .iter()
                    .map(|(k, v)| (k.clone(), v.canonicalized()))
                    .collect();
                sorted.sort_by(|a, b| canonical_key_order(&a.0, &b.0));
                CborValue::Map(sorted)
            }
            other => other.clone(),
        }
    }
}

impl PartialEq for CborValue {
    fn eq(&self, other: &Self) -> bool {
        use CborValue::*;
        match (self, other) {
            (Unsigned(a), Unsigned(b)) => a == b,
            (Bytes(a), Bytes(b)) => a == b,
            (Text(a), Text(b)) => a == b,
            (Array(a), Array(b)) => a == b,
            (Map(a), Map(b)) => {
                if a.len() != b.len() {
                    return false;
                }
                let mut a: Vec<_> = a.iter().collect();
                let mut b: Vec<_> = b.iter().collect();
                a.sort_by(|x, y| canonical_key_order(&x.0, &y.0));
                b.sort_by(|x, y| canonical_key_order(&x.0, &y.0));
                a.iter().zip(b.iter()).all(|(x, y)| x.0 == y.0 && x.1 == y.1)
            }
            _ => false,
        }
    }
}

impl From<u64> for CborValue {
    fn from(v: u64) -> Self {
        CborValue::Unsigned(v)
    }
}

impl From<&str> for CborValue {
    fn from(v: &str) -> Self {
        CborValue::Text(v.to_owned())
    }
}

/// Bytewise order of the encoded text keys: shorter heads sort first, then
/// raw UTF-8 bytes.
fn canonical_key_order(a: &str, b: &str) -> Ordering {
    let mut ea = Vec::with_capacity(a.len() + 9);
    let mut eb = Vec::with_capacity(b.len() + 9);
    write_head(&mut ea, MAJOR_TEXT, a.len() as u64);
    ea.extend_from_slice(a.as_bytes());
    write_head(&mut eb, MAJOR_TEXT, b.len() as u64);
    eb.extend_from_slice(b.as_bytes());
    ea.cmp(&eb)
}

fn write_head(out: &mut Vec<u8>, major: u8, arg: u64) {
    let m = major << 5;
    if arg < 24 {
        out.push(m | arg as u8);
    } else if arg <= u8::MAX as u64 {
        out.push(m | 24);
        out.push(arg as u8);
    } else if arg <= u16::MAX as u64 {
        out.push(m | 25);
        out.extend_from_slice(&(arg as u16).to_be_bytes());
    } else if arg <= u32::MAX as u64 {
        out.push(m | 26);
        out.extend_from_slice(&(arg as u32).to_be_bytes());
    } else {
        out.push(m | 27);
        out.extend_from_slice(&arg.to_be_bytes());
    }
}

/// Encodes `v` canonically.
pub fn encode_cbor(v: &CborValue) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    encode_into(&mut out, v)?;
    Ok(out)
}

fn encode_into(out: &mut Vec<u8>, v: &CborValue) -> Result<(), CodecError> {
    match v {
        CborValue::Unsigned(n) => write_head(out, MAJOR_UNSIGNED, *n),
        CborValue::Bytes(b) => {
            write_head(out, MAJOR_BYTES, b.len() as u64);
            out.extend_from_slice(b);
        }
        CborValue::Text(s) => {
            write_head(out, MAJOR_TEXT, s.len() as u64);
            out.extend_from_slice(s.as_bytes());
        }
        CborValue::Array(items) => {
            write_head(out, MAJOR_ARRAY, items.len() as u64);
            for item in items {
                encode_into(out, item)?;
            }
        }
        CborValue::Map(entries) => {
            let mut sorted: Vec<&(String, CborValue)> = entries.iter().collect();
            sorted.sort_by(|a, b| canonical_key_order(&a.0, &b.0));
            if let Some(dup) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(CodecError::DuplicateKey(dup[0].0.clone()));
            }
            write_head(out, MAJOR_MAP, sorted.len() as u64);
            for (k, val) in sorted {
                write_head(out, MAJOR_TEXT, k.len() as u64);
                out.extend_from_slice(k.as_bytes());
                encode_into(out, val)?;
            }
        }
    }
    Ok(())
}

/// Decodes exactly one canonical value from `b`.
pub fn decode_cbor(b: &[u8]) -> Result<CborValue, CodecError> {
    let mut reader = Reader { buf: b, pos: 0 };
    let v = reader.value(0)?;
    if reader.pos != b.len() {
        return Err(CodecError::TrailingBytes(b.len() - reader.pos));
    }
    Ok(v)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CodecError::Malformed("truncated input"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn head(&mut self) -> Result<(u8, u64), CodecError> {
        let first = self.take(1)?[0];
        let major = first >> 5;
        let info = first & 0x1f;
        let arg = match info {
            0..=23 => info as u64,
            24 => {
                let v = self.take(1)?[0] as u64;
                if v < 24 {
                    return Err(CodecError::Malformed("non-canonical integer head"));
                }
                v
            }
            25 => {
                let b = self.take(2)?;
                let v = u16::from_be_bytes([b[0], b[1]]) as u64;
                if v <= u8::MAX as u64 {
                    return Err(CodecError::Malformed("non-canonical integer head"));
                }
                v
            }
            26 => {
                let b = self.take(4)?;
                let v = u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as u64;
                if v <= u16::MAX as u64 {
                    return Err(CodecError::Malformed("non-canonical integer head"));
                }
                v
            }
            27 => {
                let b = self.take(8)?;
                let v = u64::from_be_bytes(b.try_into().expect("8 bytes"));
                if v <= u32::MAX as u64 {
                    return Err(CodecError::Malformed("non-canonical integer head"));
                }
                v
            }
            _ => return Err(CodecError::Malformed("reserved or indefinite length")),
        };
        Ok((major, arg))
    }

    fn length(&self, arg: u64) -> Result<usize, CodecError> {
        // Every element occupies at least one byte, so a count larger than the
        // remaining input can never be satisfied.
        let remaining = (self.buf.len() - self.pos) as u64;
        if arg > remaining {
            return Err(CodecError::Malformed("length exceeds input"));
        }
        Ok(arg as usize)
    }

    fn value(&mut self, depth: usize) -> Result<CborValue, CodecError> {
        if depth > MAX_DEPTH {
            return Err(CodecError::Malformed("nesting too deep"));
        }
        let (major, arg) = self.head()?;
        match major {
            MAJOR_UNSIGNED => Ok(CborValue::Unsigned(arg)),
            MAJOR_BYTES => {
                let n = self.length(arg)?;
                Ok(CborValue::Bytes(self.take(n)?.to_vec()))
            }
            MAJOR_TEXT => {
                let n = self.length(arg)?;
                let raw = self.take(n)?;
                let s = std::str::from_utf8(raw)
                    .map_err(|_| CodecError::Malformed("invalid utf-8 in text string"))?;
                Ok(CborValue::Text(s.to_owned()))
            }
            MAJOR_ARRAY => {
                let n = self.length(arg)?;
                let mut items = Vec::with_capacity(n);
                for _ in 0..n {
                    items.push(self.value(depth + 1)?);
                }
                Ok(CborValue::Array(items))
            }
            MAJOR_MAP => {
                let n = self.length(arg)?;
                let mut entries: Vec<(String, CborValue)> = Vec::with_capacity(n);
                let mut prev_key: Option<&'a [u8]> = None;
                for _ in 0..n {
                    let key_start = self.pos;
                    let key = match self.value(depth + 1)? {
                        CborValue::Text(k) => k,
                        _ => return Err(CodecError::Malformed("map key is not a text string")),
                    };
                    let encoded_key = &self.buf[key_start..self.pos];
                    if let Some(prev) = prev_key {
                        match prev.cmp(encoded_key) {
                            Ordering::Less => {}
                            Ordering::Equal => return Err(CodecError::DuplicateKey(key)),
                            Ordering::Greater => {
                                return Err(CodecError::Malformed("map keys out of canonical order"))
                            }
                        }
                    }
                    prev_key = Some(encoded_key);
                    let val = self.value(depth + 1)?;
                    entries.push((key, val));
                }
                Ok(CborValue::Map(entries))
            }
            _ => Err(CodecError::Malformed("unsupported major type")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(entries: &[(&str, CborValue)]) -> CborValue {
        CborValue::Map(
            entries
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        )
    }

    #[test]
    fn zero_is_one_byte() {
        let b = encode_cbor(&CborValue::Unsigned(0)).unwrap();
        assert_eq!(b, vec![0x00]);
        assert_eq!(decode_cbor(&b).unwrap(), CborValue::Unsigned(0));
    }

    #[test]
    fn map_insertion_order_does_not_matter() {
        let a = map(&[("a", 1u64.into()), ("b", 2u64.into())]);
        let b = map(&[("b", 2u64.into()), ("a", 1u64.into())]);
        assert_eq!(encode_cbor(&a).unwrap(), encode_cbor(&b).unwrap());
    }

    #[test]
    fn shorter_keys_sort_first() {
        let v = map(&[("bb", 1u64.into()), ("c", 2u64.into())]);
        let b = encode_cbor(&v).unwrap();
        // "c" (0x61 0x63) precedes "bb" (0x62 ...)
        assert_eq!(&b[1..3], &[0x61, b'c']);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let v = map(&[("a", 1u64.into()), ("a", 2u64.into())]);
        assert!(matches!(encode_cbor(&v), Err(CodecError::DuplicateKey(k)) if k == "a"));
    }

    #[test]
    fn empty_input_is_malformed() {
        assert!(matches!(decode_cbor(&[]), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        assert!(matches!(
            decode_cbor(&[0x01, 0x02]),
            Err(CodecError::TrailingBytes(1))
        ));
    }

    #[test]
    fn non_canonical_heads_rejected() {
        // 5 encoded with a one-byte argument
        assert!(matches!(decode_cbor(&[0x18, 0x05]), Err(CodecError::Malformed(_))));
        // 255 encoded with a two-byte argument
        assert!(matches!(
            decode_cbor(&[0x19, 0x00, 0xff]),
            Err(CodecError::Malformed(_))
        ));
    }

    #[test]
    fn unsorted_map_rejected() {
        // {"b": 1, "a": 2}
        let raw = [0xa2, 0x61, b'b', 0x01, 0x61, b'a', 0x02];
        assert!(matches!(decode_cbor(&raw), Err(CodecError::Malformed(_))));
        let dup = [0xa2, 0x61, b'a', 0x01, 0x61, b'a', 0x02];
        assert!(matches!(decode_cbor(&dup), Err(CodecError::DuplicateKey(_))));
    }

    #[test]
    fn unsupported_types_rejected() {
        for raw in [
            &[0x20][..],             // negative integer
            &[0xc0, 0x00][..],       // tag
            &[0xf4][..],             // false
            &[0xfb, 0, 0, 0, 0, 0, 0, 0, 0][..], // float64
            &[0x5f, 0xff][..],       // indefinite byte string
        ] {
            assert!(decode_cbor(raw).is_err(), "{raw:?}");
        }
    }

    #[test]
    fn huge_declared_length_is_clean_error() {
        let raw = [0x5b, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff];
        assert!(matches!(decode_cbor(&raw), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn deep_nesting_is_clean_error() {
        let raw = vec![0x81; 100];
        assert!(decode_cbor(&raw).is_err());
    }

    #[test]
    fn nested_structures_round_trip() {
        let v = map(&[
            ("ipsec", map(&[("spi", 0xdead_beefu64.into()), ("seed", CborValue::bytes(vec![7; 32]))])),
            ("list", CborValue::Array(vec![CborValue::text("x"), u64::MAX.into()])),
        ]);
        let b = encode_cbor(&v).unwrap();
        assert_eq!(decode_cbor(&b).unwrap(), v);
        assert_eq!(v.get("ipsec").and_then(|i| i.get("spi")).and_then(CborValue::as_u64), Some(0xdead_beef));
    }

    fn arb_value() -> impl proptest::strategy::Strategy<Value = CborValue> {
        use proptest::prelude::*;
        let leaf = prop_oneof![
            any::<u64>().prop_map(CborValue::Unsigned),
            (0u64..30).prop_map(CborValue::Unsigned),
            proptest::collection::vec(any::<u8>(), 0..40).prop_map(CborValue::Bytes),
            "[a-z_]{0,12}".prop_map(CborValue::Text),
        ];
        leaf.prop_recursive(4, 48, 6, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..6).prop_map(CborValue::Array),
                proptest::collection::btree_map("[a-z0-9_]{0,8}", inner, 0..6)
                    .prop_map(|m| CborValue::Map(m.into_iter().collect())),
            ]
        })
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_is_identity_and_canonical(v in arb_value()) {
            let b = encode_cbor(&v).unwrap();
            let back = decode_cbor(&b).unwrap();
            proptest::prop_assert_eq!(&back, &v);
            proptest::prop_assert_eq!(encode_cbor(&back).unwrap(), b);
        }

        #[test]
        fn decoder_never_panics(b in proptest::collection::vec(proptest::prelude::any::<u8>(), 0..64)) {
            if let Ok(v) = decode_cbor(&b) {
                proptest::prop_assert_eq!(encode_cbor(&v).unwrap(), b);
            }
        }
    }
}

//! Access tokens for the IPsec profile.
//!
//! Claims are a canonical CBOR map with short text keys (see `docs/wire.md`).
//! Sealing follows the Encrypt0 shape: `[protected, {"iv": iv8}, ciphertext]`
//! where the AEAD additional data is `"Encrypt0" | protected`.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::codec::{decode_cbor, encode_cbor, CborValue, CodecError};
use crate::crypto::{self, cert, AeadKey, IV_LEN};

pub const PROFILE_IPSEC: &str = "ipsec";
pub const KMP_IKEV2: &str = "ikev2";
pub const SEED_LEN: usize = 32;
pub const PSK_LEN: usize = 32;
const SEAL_ALG: &str = "A128CCM8";
const SEAL_CONTEXT: &[u8] = b"Encrypt0";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("token authentication failed")]
    AuthFail,
    #[error("token expired at {exp}, now {now}")]
    Expired { exp: u64, now: u64 },
    #[error("token profile {0:?} is not \"ipsec\"")]
    WrongProfile(String),
    #[error("inconsistent method signaling: {0}")]
    InconsistentSignaling(&'static str),
    #[error("invalid claim: {0}")]
    InvalidClaim(&'static str),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IpsecMode {
    Transport,
    Tunnel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SecurityProtocol {
    Esp,
    Ah,
}

impl SecurityProtocol {
    /// IP protocol number.
    pub fn number(self) -> u64 {
        match self {
            SecurityProtocol::Esp => 50,
            SecurityProtocol::Ah => 51,
        }
    }
}

/// Key establishment method signalled by a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Direct provisioning: the AS defines both SAs.
    Dp,
    /// IKEv2 authenticated with a pre-shared key.
    IkePsk,
    /// IKEv2 authenticated with raw or certified public keys.
    IkeAsym,
}

/// SA description carried in the token and in the RS Information.
///
/// SPIs and the seed are present only for direct provisioning; with IKEv2
/// they are negotiated between Client and RS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IpsecStruct {
    pub spi_sa_c: Option<u32>,
    pub spi_sa_rs: Option<u32>,
    pub mode: IpsecMode,
    pub protocol: SecurityProtocol,
    pub seed: Option<[u8; SEED_LEN]>,
    pub lifetime_s: u64,
    pub tunnel_src: Option<Vec<u8>>,
    pub tunnel_dst: Option<Vec<u8>>,
}

impl IpsecStruct {
    pub fn validate(&self) -> Result<(), TokenError> {
        if self.spi_sa_c.is_some() != self.spi_sa_rs.is_some() {
            return Err(TokenError::InvalidClaim("SPIs must be given as a pair"));
        }
        if let (Some(c), Some(rs)) = (self.spi_sa_c, self.spi_sa_rs) {
            if c == rs {
                return Err(TokenError::InvalidClaim("SPI_SA_C equals SPI_SA_RS"));
            }
            if c == 0 || rs == 0 {
                return Err(TokenError::InvalidClaim("SPI 0 is reserved"));
            }
        }
        if self.seed.is_some() != self.spi_sa_c.is_some() {
            return Err(TokenError::InvalidClaim("seed and SPIs go together"));
        }
        let tunnel = self.mode == IpsecMode::Tunnel;
        if tunnel != (self.tunnel_src.is_some() && self.tunnel_dst.is_some())
            || self.tunnel_src.is_some() != self.tunnel_dst.is_some()
        {
            return Err(TokenError::InvalidClaim(
                "tunnel addresses present exactly in tunnel mode",
            ));
        }
        Ok(())
    }

    pub fn to_cbor(&self) -> CborValue {
        let mut m: Vec<(String, CborValue)> = Vec::new();
        if let Some(c) = self.spi_sa_c {
            m.push(("spi_c".into(), (c as u64).into()));
        }
        if let Some(rs) = self.spi_sa_rs {
            m.push(("spi_rs".into(), (rs as u64).into()));
        }
        m.push((
            "mode".into(),
            match self.mode {
                IpsecMode::Transport => 1u64,
                IpsecMode::Tunnel => 2u64,
            }
            .into(),
        ));
        m.push(("proto".into(), self.protocol.number().into()));
        if let Some(seed) = &self.seed {
            m.push(("seed".into(), CborValue::bytes(seed.to_vec())));
        }
        m.push(("life".into(), self.lifetime_s.into()));
        if let Some(src) = &self.tunnel_src {
            m.push(("tsrc".into(), CborValue::bytes(src.clone())));
        }
        if let Some(dst) = &self.tunnel_dst {
            m.push(("tdst".into(), CborValue::bytes(dst.clone())));
        }
        CborValue::Map(m)
    }

    pub fn from_cbor(v: &CborValue) -> Result<Self, TokenError> {
        v.as_map().ok_or(TokenError::InvalidClaim("ipsec is not a map"))?;
        let spi = |k: &str| -> Result<Option<u32>, TokenError> {
            v.get(k)
                .map(|x| {
                    x.as_u64()
                        .and_then(|n| u32::try_from(n).ok())
                        .ok_or(TokenError::InvalidClaim("SPI is not a 32-bit unsigned"))
                })
                .transpose()
        };
        let mode = match v.get("mode").and_then(CborValue::as_u64) {
            Some(1) => IpsecMode::Transport,
            Some(2) => IpsecMode::Tunnel,
            _ => return Err(TokenError::InvalidClaim("ipsec mode")),
        };
        let protocol = match v.get("proto").and_then(CborValue::as_u64) {
            Some(50) => SecurityProtocol::Esp,
            Some(51) => SecurityProtocol::Ah,
            _ => return Err(TokenError::InvalidClaim("ipsec protocol")),
        };
        let seed = match v.get("seed") {
            None => None,
            Some(s) => Some(
                s.as_bytes()
                    .and_then(|b| <[u8; SEED_LEN]>::try_from(b).ok())
                    .ok_or(TokenError::InvalidClaim("seed must be 32 bytes"))?,
            ),
        };
        let lifetime_s = v
            .get("life")
            .and_then(CborValue::as_u64)
            .ok_or(TokenError::InvalidClaim("ipsec lifetime"))?;
        let bytes_opt = |k: &str| -> Result<Option<Vec<u8>>, TokenError> {
            v.get(k)
                .map(|x| {
                    x.as_bytes()
                        .map(<[u8]>::to_vec)
                        .ok_or(TokenError::InvalidClaim("tunnel address"))
                })
                .transpose()
        };
        let s = IpsecStruct {
            spi_sa_c: spi("spi_c")?,
            spi_sa_rs: spi("spi_rs")?,
            mode,
            protocol,
            seed,
            lifetime_s,
            tunnel_src: bytes_opt("tsrc")?,
            tunnel_dst: bytes_opt("tdst")?,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyType {
    Symmetric,
    Ec,
}

impl KeyType {
    fn as_str(self) -> &'static str {
        match self {
            KeyType::Symmetric => "Symmetric",
            KeyType::Ec => "EC",
        }
    }
}

/// A COSE_Key-style proof-of-possession key.
///
/// `key_bytes` is a 32-byte secret for `Symmetric` and an uncompressed P-256
/// point for `EC`. It is `None` when the claim only references a key by
/// `kid`. An `EC` key may come with an X.509 chain, leaf first; on the wire
/// the chain then replaces the raw key.
#[derive(Clone, PartialEq, Eq)]
pub struct CoseKeyClaim {
    pub kty: KeyType,
    pub kid: Vec<u8>,
    pub key_bytes: Option<Vec<u8>>,
    pub chain: Vec<Vec<u8>>,
}

impl std::fmt::Debug for CoseKeyClaim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoseKeyClaim")
            .field("kty", &self.kty)
            .field("kid", &self.kid)
            .field("has_key", &self.key_bytes.is_some())
            .field("chain_len", &self.chain.len())
            .finish()
    }
}

impl CoseKeyClaim {
    pub fn symmetric(kid: Vec<u8>, key: [u8; PSK_LEN]) -> Self {
        CoseKeyClaim {
            kty: KeyType::Symmetric,
            kid,
            key_bytes: Some(key.to_vec()),
            chain: Vec::new(),
        }
    }

    pub fn ec_raw(kid: Vec<u8>, public: Vec<u8>) -> Self {
        CoseKeyClaim {
            kty: KeyType::Ec,
            kid,
            key_bytes: Some(public),
            chain: Vec::new(),
        }
    }

    /// EC key carried as a certificate chain; the raw key is read from the
    /// leaf.
    pub fn ec_certificate(kid: Vec<u8>, chain: Vec<Vec<u8>>) -> Result<Self, TokenError> {
        let leaf = chain.first().ok_or(TokenError::InvalidClaim("empty certificate chain"))?;
        let public = cert::certificate_public_key(leaf).map_err(|_| TokenError::InvalidClaim("certificate"))?;
        Ok(CoseKeyClaim {
            kty: KeyType::Ec,
            kid,
            key_bytes: Some(public),
            chain,
        })
    }

    pub fn reference(kty: KeyType, kid: Vec<u8>) -> Self {
        CoseKeyClaim {
            kty,
            kid,
            key_bytes: None,
            chain: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TokenError> {
        match (self.kty, &self.key_bytes) {
            (KeyType::Symmetric, Some(k)) if k.len() != PSK_LEN => {
                Err(TokenError::InvalidClaim("symmetric key must be 32 bytes"))
            }
            (KeyType::Symmetric, _) if !self.chain.is_empty() => {
                Err(TokenError::InvalidClaim("certificate on a symmetric key"))
            }
            (KeyType::Ec, Some(k)) if !crypto::is_valid_public_key(k) => {
                Err(TokenError::InvalidClaim("EC key is not a valid P-256 point"))
            }
            _ => Ok(()),
        }
    }

    pub fn to_cbor(&self) -> CborValue {
        let mut m: Vec<(String, CborValue)> = vec![
            ("kty".into(), CborValue::text(self.kty.as_str())),
            ("kid".into(), CborValue::bytes(self.kid.clone())),
        ];
        match (self.chain.is_empty(), &self.key_bytes) {
            (false, _) => m.push((
                "x5chain".into(),
                CborValue::Array(self.chain.iter().map(|c| CborValue::bytes(c.clone())).collect()),
            )),
            (true, Some(k)) if self.kty == KeyType::Symmetric => {
                m.push(("k".into(), CborValue::bytes(k.clone())))
            }
            (true, Some(k)) => m.push(("pub".into(), CborValue::bytes(k.clone()))),
            (true, None) => {}
        }
        CborValue::Map(m)
    }

    pub fn from_cbor(v: &CborValue) -> Result<Self, TokenError> {
        let kty = match v.get("kty").and_then(CborValue::as_text) {
            Some("Symmetric") => KeyType::Symmetric,
            Some("EC") => KeyType::Ec,
            _ => return Err(TokenError::InvalidClaim("kty")),
        };
        let kid = v
            .get("kid")
            .and_then(CborValue::as_bytes)
            .ok_or(TokenError::InvalidClaim("kid"))?
            .to_vec();
        let claim = if let Some(c) = v.get("x5chain") {
            if kty != KeyType::Ec {
                return Err(TokenError::InvalidClaim("certificate on a symmetric key"));
            }
            let chain = c
                .as_array()
                .filter(|a| !a.is_empty() && a.len() <= cert::MAX_CHAIN_LEN)
                .ok_or(TokenError::InvalidClaim("x5chain"))?
                .iter()
                .map(|c| c.as_bytes().map(<[u8]>::to_vec).ok_or(TokenError::InvalidClaim("x5chain")))
                .collect::<Result<Vec<_>, _>>()?;
            CoseKeyClaim::ec_certificate(kid, chain)?
        } else {
            let field = match kty {
                KeyType::Symmetric => "k",
                KeyType::Ec => "pub",
            };
            let key_bytes = v
                .get(field)
                .map(|k| {
                    k.as_bytes()
                        .map(<[u8]>::to_vec)
                        .ok_or(TokenError::InvalidClaim("key bytes"))
                })
                .transpose()?;
            CoseKeyClaim {
                kty,
                kid,
                key_bytes,
                chain: Vec::new(),
            }
        };
        claim.validate()?;
        Ok(claim)
    }
}

fn cnf_to_cbor(k: &CoseKeyClaim) -> CborValue {
    CborValue::Map(vec![("COSE_Key".into(), k.to_cbor())])
}

fn cnf_from_cbor(v: &CborValue) -> Result<CoseKeyClaim, TokenError> {
    let key = v
        .get("COSE_Key")
        .ok_or(TokenError::InvalidClaim("cnf without COSE_Key"))?;
    CoseKeyClaim::from_cbor(key)
}

/// Claim set of an access token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessToken {
    pub iss: String,
    pub aud: String,
    pub client_id: String,
    pub scope: String,
    pub exp: u64,
    /// Token identifier, unique per issuance.
    pub cti: Vec<u8>,
    pub profile: String,
    pub kmp: Option<String>,
    /// Absent only for tokens outside the IPsec profile.
    pub ipsec: Option<IpsecStruct>,
    pub cnf: Option<CoseKeyClaim>,
    /// Opaque, carried verbatim.
    pub state: Option<String>,
}

impl AccessToken {
    pub fn to_cbor(&self) -> CborValue {
        let mut m: Vec<(String, CborValue)> = vec![
            ("iss".into(), CborValue::text(&*self.iss)),
            ("aud".into(), CborValue::text(&*self.aud)),
            ("sub".into(), CborValue::text(&*self.client_id)),
            ("scope".into(), CborValue::text(&*self.scope)),
            ("exp".into(), self.exp.into()),
            ("cti".into(), CborValue::bytes(self.cti.clone())),
            ("profile".into(), CborValue::text(&*self.profile)),
        ];
        if let Some(kmp) = &self.kmp {
            m.push(("kmp".into(), CborValue::text(&**kmp)));
        }
        if let Some(ipsec) = &self.ipsec {
            m.push(("ipsec".into(), ipsec.to_cbor()));
        }
        if let Some(cnf) = &self.cnf {
            m.push(("cnf".into(), cnf_to_cbor(cnf)));
        }
        if let Some(state) = &self.state {
            m.push(("state".into(), CborValue::text(&**state)));
        }
        CborValue::Map(m)
    }

    pub fn from_cbor(v: &CborValue) -> Result<Self, TokenError> {
        v.as_map().ok_or(TokenError::InvalidClaim("claims are not a map"))?;
        let text = |k: &'static str| -> Result<String, TokenError> {
            v.get(k)
                .and_then(CborValue::as_text)
                .map(str::to_owned)
                .ok_or(TokenError::InvalidClaim(k))
        };
        let opt_text = |k: &'static str| -> Result<Option<String>, TokenError> {
            v.get(k)
                .map(|x| x.as_text().map(str::to_owned).ok_or(TokenError::InvalidClaim(k)))
                .transpose()
        };
        Ok(AccessToken {
            iss: text("iss")?,
            aud: text("aud")?,
            client_id: text("sub")?,
            scope: text("scope")?,
            exp: v
                .get("exp")
                .and_then(CborValue::as_u64)
                .ok_or(TokenError::InvalidClaim("exp"))?,
            cti: v
                .get("cti")
                .and_then(CborValue::as_bytes)
                .ok_or(TokenError::InvalidClaim("cti"))?
                .to_vec(),
            profile: text("profile")?,
            kmp: opt_text("kmp")?,
            ipsec: v.get("ipsec").map(IpsecStruct::from_cbor).transpose()?,
            cnf: v.get("cnf").map(cnf_from_cbor).transpose()?,
            state: opt_text("state")?,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, TokenError> {
        Ok(encode_cbor(&self.to_cbor())?)
    }

    /// Whether the scope grants `method` (`"GET"` needs `read`, `"POST"`
    /// needs `write`). Scope is a space-separated list.
    pub fn scope_allows(&self, method: crate::codec::Code) -> bool {
        let needed = match method {
            crate::codec::Code::Get => "read",
            crate::codec::Code::Post => "write",
            _ => return false,
        };
        self.scope.split_whitespace().any(|s| s == needed)
    }
}

/// Determines the establishment method from the token's claims.
pub fn validate_method_signaling(t: &AccessToken) -> Result<Method, TokenError> {
    let ipsec = t
        .ipsec
        .as_ref()
        .ok_or(TokenError::InconsistentSignaling("no ipsec structure"))?;
    let ikev2 = t.kmp.as_deref() == Some(KMP_IKEV2);
    match (&t.cnf, ipsec.seed.is_some()) {
        (None, true) if t.kmp.is_none() && ipsec.spi_sa_c.is_some() => Ok(Method::Dp),
        (None, true) => Err(TokenError::InconsistentSignaling("kmp given with a seed")),
        (None, false) => Err(TokenError::InconsistentSignaling("neither seed nor COSE_Key")),
        (Some(_), true) => Err(TokenError::InconsistentSignaling("both seed and COSE_Key")),
        (Some(_), false) if !ikev2 => {
            Err(TokenError::InconsistentSignaling("COSE_Key without kmp ikev2"))
        }
        (Some(k), false) if k.key_bytes.is_none() => {
            Err(TokenError::InconsistentSignaling("COSE_Key without key material"))
        }
        (Some(k), false) => Ok(match k.kty {
            KeyType::Symmetric => Method::IkePsk,
            KeyType::Ec => Method::IkeAsym,
        }),
    }
}

fn seal_aad(protected: &[u8]) -> Vec<u8> {
    [SEAL_CONTEXT, protected].concat()
}

fn protected_header() -> Vec<u8> {
    encode_cbor(&CborValue::Map(vec![("alg".into(), CborValue::text(SEAL_ALG))]))
        .expect("static header encodes")
}

/// Seals the claims for the RS. The result is opaque to the Client.
pub fn seal_token<R: RngCore + CryptoRng>(
    t: &AccessToken,
    as_rs_key: &AeadKey,
    rng: &mut R,
) -> Result<Vec<u8>, TokenError> {
    if let Some(ipsec) = &t.ipsec {
        ipsec.validate()?;
    }
    if let Some(cnf) = &t.cnf {
        cnf.validate()?;
    }
    let claims = t.encode()?;
    let protected = protected_header();
    let mut iv = [0u8; IV_LEN];
    rng.fill_bytes(&mut iv);
    let ct = crypto::aead_seal(as_rs_key, &iv, &seal_aad(&protected), &claims);
    let sealed = CborValue::Array(vec![
        CborValue::Bytes(protected),
        CborValue::Map(vec![("iv".into(), CborValue::bytes(iv.to_vec()))]),
        CborValue::Bytes(ct),
    ]);
    Ok(encode_cbor(&sealed)?)
}

/// AEAD-opens a sealed token and checks expiry, without a profile check.
pub fn open_token(b: &[u8], as_rs_key: &AeadKey, now: u64) -> Result<AccessToken, TokenError> {
    let outer = decode_cbor(b).map_err(|_| TokenError::AuthFail)?;
    let parts = outer.as_array().ok_or(TokenError::AuthFail)?;
    let [protected, unprotected, ct] = parts else {
        return Err(TokenError::AuthFail);
    };
    let protected = protected.as_bytes().ok_or(TokenError::AuthFail)?;
    let iv: [u8; IV_LEN] = unprotected
        .get("iv")
        .and_then(CborValue::as_bytes)
        .and_then(|b| b.try_into().ok())
        .ok_or(TokenError::AuthFail)?;
    let ct = ct.as_bytes().ok_or(TokenError::AuthFail)?;
    let claims =
        crypto::aead_open(as_rs_key, &iv, &seal_aad(protected), ct).map_err(|_| TokenError::AuthFail)?;
    let header = decode_cbor(protected).map_err(|_| TokenError::AuthFail)?;
    if header.get("alg").and_then(CborValue::as_text) != Some(SEAL_ALG) {
        return Err(TokenError::InvalidClaim("alg"));
    }
    let t = AccessToken::from_cbor(&decode_cbor(&claims)?)?;
    if t.exp <= now {
        return Err(TokenError::Expired { exp: t.exp, now });
    }
    Ok(t)
}

/// Opens a token of the IPsec profile: AEAD, expiry and profile checks.
pub fn unseal_token(b: &[u8], as_rs_key: &AeadKey, now: u64) -> Result<AccessToken, TokenError> {
    let t = open_token(b, as_rs_key, now)?;
    if t.profile != PROFILE_IPSEC {
        return Err(TokenError::WrongProfile(t.profile));
    }
    Ok(t)
}

/// What the AS tells the Client in the Access Token Response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RsInformation {
    pub profile: String,
    pub kmp: Option<String>,
    pub ipsec: Option<IpsecStruct>,
    /// PSK (with kid) or the RS public key.
    pub cnf: Option<CoseKeyClaim>,
    pub token_bytes: Vec<u8>,
}

impl RsInformation {
    pub fn to_cbor(&self) -> CborValue {
        let mut m: Vec<(String, CborValue)> = vec![
            ("access_token".into(), CborValue::bytes(self.token_bytes.clone())),
            ("profile".into(), CborValue::text(&*self.profile)),
        ];
        if let Some(kmp) = &self.kmp {
            m.push(("kmp".into(), CborValue::text(&**kmp)));
        }
        if let Some(ipsec) = &self.ipsec {
            m.push(("ipsec".into(), ipsec.to_cbor()));
        }
        if let Some(cnf) = &self.cnf {
            m.push(("cnf".into(), cnf_to_cbor(cnf)));
        }
        CborValue::Map(m)
    }

    pub fn encode(&self) -> Result<Vec<u8>, TokenError> {
        Ok(encode_cbor(&self.to_cbor())?)
    }

    pub fn decode(b: &[u8]) -> Result<Self, TokenError> {
        let v = decode_cbor(b)?;
        Ok(RsInformation {
            profile: v
                .get("profile")
                .and_then(CborValue::as_text)
                .ok_or(TokenError::InvalidClaim("profile"))?
                .to_owned(),
            kmp: v
                .get("kmp")
                .map(|k| k.as_text().map(str::to_owned).ok_or(TokenError::InvalidClaim("kmp")))
                .transpose()?,
            ipsec: v.get("ipsec").map(IpsecStruct::from_cbor).transpose()?,
            cnf: v.get("cnf").map(cnf_from_cbor).transpose()?,
            token_bytes: v
                .get("access_token")
                .and_then(CborValue::as_bytes)
                .ok_or(TokenError::InvalidClaim("access_token"))?
                .to_vec(),
        })
    }

    /// Method signalled to the Client; mirrors [`validate_method_signaling`].
    pub fn method(&self) -> Result<Method, TokenError> {
        let ipsec = self
            .ipsec
            .as_ref()
            .ok_or(TokenError::InconsistentSignaling("no ipsec structure"))?;
        match (&self.cnf, ipsec.seed.is_some(), self.kmp.as_deref()) {
            (None, true, None) => Ok(Method::Dp),
            (Some(k), false, Some(KMP_IKEV2)) => Ok(match k.kty {
                KeyType::Symmetric => Method::IkePsk,
                KeyType::Ec => Method::IkeAsym,
            }),
            _ => Err(TokenError::InconsistentSignaling("RS Information")),
        }
    }
}

/// Access Token Request payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRequest {
    pub client_id: String,
    /// Audience: the RS identifier.
    pub audience: String,
    pub scope: String,
    /// Client key: full key on first contact, `kid` reference afterwards.
    pub req_cnf: Option<CoseKeyClaim>,
    /// SPI_SA_RS proposed by the Client after a collision.
    pub spi_sa_rs: Option<u32>,
}

impl TokenRequest {
    pub fn to_cbor(&self) -> CborValue {
        let mut m: Vec<(String, CborValue)> = vec![
            ("client_id".into(), CborValue::text(&*self.client_id)),
            ("aud".into(), CborValue::text(&*self.audience)),
            ("scope".into(), CborValue::text(&*self.scope)),
        ];
        if let Some(k) = &self.req_cnf {
            m.push(("req_cnf".into(), cnf_to_cbor(k)));
        }
        if let Some(spi) = self.spi_sa_rs {
            m.push((
                "ipsec".into(),
                CborValue::Map(vec![("spi_rs".into(), (spi as u64).into())]),
            ));
        }
        CborValue::Map(m)
    }

    pub fn encode(&self) -> Result<Vec<u8>, TokenError> {
        Ok(encode_cbor(&self.to_cbor())?)
    }

    pub fn decode(b: &[u8]) -> Result<Self, TokenError> {
        let v = decode_cbor(b)?;
        let text = |k: &'static str| -> Result<String, TokenError> {
            v.get(k)
                .and_then(CborValue::as_text)
                .map(str::to_owned)
                .ok_or(TokenError::InvalidClaim(k))
        };
        let spi_sa_rs = match v.get("ipsec") {
            None => None,
            Some(i) => {
                let m = i.as_map().ok_or(TokenError::InvalidClaim("ipsec"))?;
                if m.len() != 1 {
                    return Err(TokenError::InvalidClaim("SPI request carries only spi_rs"));
                }
                Some(
                    i.get("spi_rs")
                        .and_then(CborValue::as_u64)
                        .and_then(|n| u32::try_from(n).ok())
                        .filter(|&n| n != 0)
                        .ok_or(TokenError::InvalidClaim("spi_rs"))?,
                )
            }
        };
        Ok(TokenRequest {
            client_id: text("client_id")?,
            audience: text("aud")?,
            scope: text("scope")?,
            req_cnf: v.get("req_cnf").map(cnf_from_cbor).transpose()?,
            spi_sa_rs,
        })
    }
}

/// Introspection response body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntrospectionResponse {
    pub active: bool,
    pub scope: Option<String>,
    pub exp: Option<u64>,
    pub cnf: Option<CoseKeyClaim>,
}

impl IntrospectionResponse {
    pub fn inactive() -> Self {
        IntrospectionResponse {
            active: false,
            scope: None,
            exp: None,
            cnf: None,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, TokenError> {
        let mut m: Vec<(String, CborValue)> =
            vec![("active".into(), (self.active as u64).into())];
        if let Some(s) = &self.scope {
            m.push(("scope".into(), CborValue::text(&**s)));
        }
        if let Some(e) = self.exp {
            m.push(("exp".into(), e.into()));
        }
        if let Some(k) = &self.cnf {
            m.push(("cnf".into(), cnf_to_cbor(k)));
        }
        Ok(encode_cbor(&CborValue::Map(m))?)
    }

    pub fn decode(b: &[u8]) -> Result<Self, TokenError> {
        let v = decode_cbor(b)?;
        let active = match v.get("active").and_then(CborValue::as_u64) {
            Some(0) => false,
            Some(1) => true,
            _ => return Err(TokenError::InvalidClaim("active")),
        };
        Ok(IntrospectionResponse {
            active,
            scope: v.get("scope").and_then(CborValue::as_text).map(str::to_owned),
            exp: v.get("exp").and_then(CborValue::as_u64),
            cnf: v.get("cnf").map(cnf_from_cbor).transpose()?,
        })
    }
}

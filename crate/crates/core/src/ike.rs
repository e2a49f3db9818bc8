//! Minimal IKEv2: one SA_INIT and one AUTH exchange, PSK or signature
//! authentication, and child SA key derivation.
//!
//! The Resource Server initiates. Message flow:
//!
//! ```text
//! RS (initiator)                      Client (responder)
//! initiate()          -- SA_INIT -->  respond_sa_init()
//! handle_sa_init()    <-- SA_INIT --
//! send_auth()         --  AUTH   -->  respond_auth()
//! handle_auth()       <--  AUTH   --
//! ```
//!
//! The value of the auth segment is `iv8 | AEAD(SK_e, iv8, aad, AUTH)` where
//! `aad` is the framed message with an empty auth segment. `SK_ei` seals
//! initiator messages and `SK_er` responder messages.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::codec::{frame_ike, CodecError, ExchangeType, IkePayload, IkeRole, SegmentTag};
use crate::crypto::{
    self, CryptoError, DhKeyPair, KeySchedule, SaKeyPair, SignKeyPair, CHILD_KEYMAT_LEN, IV_LEN,
};
use crate::token::CoseKeyClaim;

pub const NONCE_LEN: usize = 16;
/// ENCR_AES_CCM_8, PRF_HMAC_SHA2_256, 256-bit random ECP group.
pub const PROPOSAL: [u16; 3] = [14, 5, 19];
const KEY_PAD: &[u8] = b"Key Pad for IKEv2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IkeState {
    Idle,
    SaInitSent,
    SaInitReceived,
    AuthSent,
    Established,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AuthMode {
    Psk,
    Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IkeError {
    #[error("operation not allowed in state {0:?}")]
    WrongState(IkeState),
    #[error("proposal not acceptable")]
    BadProposal,
    #[error("invalid DH element")]
    InvalidElement,
    #[error("peer authentication failed")]
    AuthFail,
    #[error("unexpected message: {0}")]
    Unexpected(&'static str),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl From<CryptoError> for IkeError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::InvalidElement => IkeError::InvalidElement,
            _ => IkeError::AuthFail,
        }
    }
}

/// Proof-of-possession material for one side.
#[derive(Clone)]
pub enum Credential {
    Psk(Vec<u8>),
    Signature {
        own: SignKeyPair,
        peer_public: Vec<u8>,
    },
}

impl std::fmt::Debug for Credential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Credential::Psk(_) => f.write_str("Psk(..)"),
            Credential::Signature { own, .. } => {
                f.debug_struct("Signature").field("own", own).finish_non_exhaustive()
            }
        }
    }
}

impl Credential {
    pub fn mode(&self) -> AuthMode {
        match self {
            Credential::Psk(_) => AuthMode::Psk,
            Credential::Signature { .. } => AuthMode::Signature,
        }
    }
}

/// Keys of the child SA pair derived at the end of the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildSaKeys {
    pub sa_c_key: crypto::AeadKey,
    pub sa_rs_key: crypto::AeadKey,
}

/// Per-session settings.
#[derive(Debug, Clone)]
pub struct IkeConfig {
    pub role: IkeRole,
    pub credential: Credential,
    pub pop_key: Option<CoseKeyClaim>,
    pub own_id: Vec<u8>,
    pub peer_id: Vec<u8>,
    /// SPI this side wants for its inbound child SA.
    pub child_spi: u32,
    pub ts_i: Vec<u8>,
    pub ts_r: Vec<u8>,
}

#[derive(Debug)]
pub struct IkeSession {
    pub role: IkeRole,
    state: IkeState,
    pub spi_i: [u8; 8],
    pub spi_r: [u8; 8],
    nonce_i: Option<[u8; NONCE_LEN]>,
    nonce_r: Option<[u8; NONCE_LEN]>,
    dh: Option<DhKeyPair>,
    shared: Option<[u8; 32]>,
    schedule: Option<KeySchedule>,
    credential: Credential,
    pub pop_key: Option<CoseKeyClaim>,
    own_id: Vec<u8>,
    peer_id: Vec<u8>,
    /// Own SA_INIT message as framed.
    transcript_msg1: Vec<u8>,
    /// Peer SA_INIT message as received.
    peer_sa_init: Vec<u8>,
    child_keymat: Option<Vec<u8>>,
    local_child_spi: u32,
    peer_child_spi: Option<u32>,
    ts_i: Vec<u8>,
    ts_r: Vec<u8>,
    peer_authenticated: bool,
}

fn random_spi<R: RngCore + CryptoRng>(rng: &mut R) -> [u8; 8] {
    loop {
        let mut s = [0u8; 8];
        rng.fill_bytes(&mut s);
        if s != [0; 8] {
            return s;
        }
    }
}

fn encode_proposal(ids: &[u16]) -> Vec<u8> {
    ids.iter().flat_map(|i| i.to_be_bytes()).collect()
}

fn check_proposal(b: Option<&[u8]>) -> Result<(), IkeError> {
    match b {
        Some(b) if b == encode_proposal(&PROPOSAL).as_slice() => Ok(()),
        _ => Err(IkeError::BadProposal),
    }
}

impl IkeSession {
    pub fn new(cfg: IkeConfig) -> Self {
        IkeSession {
            role: cfg.role,
            state: IkeState::Idle,
            spi_i: [0; 8],
            spi_r: [0; 8],
            nonce_i: None,
            nonce_r: None,
            dh: None,
            shared: None,
            schedule: None,
            credential: cfg.credential,
            pop_key: cfg.pop_key,
            own_id: cfg.own_id,
            peer_id: cfg.peer_id,
            transcript_msg1: Vec::new(),
            peer_sa_init: Vec::new(),
            child_keymat: None,
            local_child_spi: cfg.child_spi,
            peer_child_spi: None,
            ts_i: cfg.ts_i,
            ts_r: cfg.ts_r,
            peer_authenticated: false,
        }
    }

    pub fn state(&self) -> IkeState {
        self.state
    }

    pub fn auth_mode(&self) -> AuthMode {
        self.credential.mode()
    }

    pub fn schedule(&self) -> Option<&KeySchedule> {
        self.schedule.as_ref()
    }

    pub fn child_keymat(&self) -> Option<&[u8]> {
        self.child_keymat.as_deref()
    }

    pub fn child_keys(&self) -> Option<ChildSaKeys> {
        let km = self.child_keymat.as_ref()?;
        let p = SaKeyPair::from_keymat(km).ok()?;
        Some(ChildSaKeys {
            sa_c_key: p.sa_c,
            sa_rs_key: p.sa_rs,
        })
    }

    pub fn local_child_spi(&self) -> u32 {
        self.local_child_spi
    }

    pub fn peer_child_spi(&self) -> Option<u32> {
        self.peer_child_spi
    }

    /// Whether the peer's AUTH payload has been verified.
    pub fn peer_authenticated(&self) -> bool {
        self.peer_authenticated
    }

    pub fn nonces(&self) -> Option<([u8; NONCE_LEN], [u8; NONCE_LEN])> {
        Some((self.nonce_i?, self.nonce_r?))
    }

    /// Agreed DH secret, exposed for cross-peer checks.
    pub fn shared_secret(&self) -> Option<&[u8; 32]> {
        self.shared.as_ref()
    }

    fn require(&self, want: IkeState) -> Result<(), IkeError> {
        if self.state == want {
            Ok(())
        } else {
            Err(IkeError::WrongState(self.state))
        }
    }

    fn require_role(&self, role: IkeRole) -> Result<(), IkeError> {
        if self.role == role {
            Ok(())
        } else {
            Err(IkeError::WrongState(self.state))
        }
    }

    /// Runs `f`; any error other than `WrongState` moves the session to
    /// `Failed`.
    fn guarded<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, IkeError>) -> Result<T, IkeError> {
        let r = f(self);
        if let Err(e) = &r {
            if !matches!(e, IkeError::WrongState(_)) {
                self.state = IkeState::Failed;
                self.schedule = None;
                self.child_keymat = None;
            }
        }
        r
    }

    fn sa_init_payload(&self, role: IkeRole, nonce: &[u8]) -> IkePayload {
        let dh = self.dh.as_ref().expect("dh generated before SA_INIT");
        IkePayload {
            exchange_type: ExchangeType::SaInit,
            role,
            spi_i: self.spi_i,
            spi_r: self.spi_r,
            body: vec![
                (SegmentTag::Proposal, encode_proposal(&PROPOSAL)),
                (SegmentTag::Ke, dh.public_element().to_vec()),
                (SegmentTag::Nonce, nonce.to_vec()),
            ],
        }
    }

    fn check_sa_init(&self, msg: &IkePayload, sender: IkeRole) -> Result<([u8; NONCE_LEN], Vec<u8>), IkeError> {
        if msg.exchange_type != ExchangeType::SaInit || msg.role != sender {
            return Err(IkeError::Unexpected("not an SA_INIT from the expected role"));
        }
        check_proposal(msg.segment(SegmentTag::Proposal))?;
        let ke = msg
            .segment(SegmentTag::Ke)
            .ok_or(IkeError::Unexpected("SA_INIT without ke"))?
            .to_vec();
        let nonce: [u8; NONCE_LEN] = msg
            .segment(SegmentTag::Nonce)
            .and_then(|n| n.try_into().ok())
            .ok_or(IkeError::Unexpected("SA_INIT nonce must be 16 bytes"))?;
        Ok((nonce, ke))
    }

    fn compute_keys(&mut self, peer_ke: &[u8]) -> Result<(), IkeError> {
        let dh = self.dh.as_ref().expect("dh generated");
        let shared = crypto::dh_shared(dh, peer_ke)?;
        let (ni, nr) = self.nonces().expect("both nonces known");
        self.schedule = Some(crypto::derive_schedule(&shared, &ni, &nr, &self.spi_i, &self.spi_r)?);
        self.shared = Some(shared);
        Ok(())
    }

    /// First SA_INIT, sent by the initiator.
    pub fn initiate<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Result<IkePayload, IkeError> {
        self.require(IkeState::Idle)?;
        self.require_role(IkeRole::Initiator)?;
        self.spi_i = random_spi(rng);
        let mut n = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut n);
        self.nonce_i = Some(n);
        self.dh = Some(crypto::dh_generate(rng));
        let msg = self.sa_init_payload(IkeRole::Initiator, &n);
        self.transcript_msg1 = frame_ike(&msg)?;
        self.state = IkeState::SaInitSent;
        Ok(msg)
    }

    /// Responder side of SA_INIT.
    pub fn respond_sa_init<R: RngCore + CryptoRng>(
        &mut self,
        msg: &IkePayload,
        rng: &mut R,
    ) -> Result<IkePayload, IkeError> {
        self.require(IkeState::Idle)?;
        self.require_role(IkeRole::Responder)?;
        self.guarded(|s| {
            let (ni, ke) = s.check_sa_init(msg, IkeRole::Initiator)?;
            s.peer_sa_init = frame_ike(msg)?;
            s.spi_i = msg.spi_i;
            s.spi_r = random_spi(rng);
            s.nonce_i = Some(ni);
            let mut nr = [0u8; NONCE_LEN];
            rng.fill_bytes(&mut nr);
            s.nonce_r = Some(nr);
            s.dh = Some(crypto::dh_generate(rng));
            s.compute_keys(&ke)?;
            let reply = s.sa_init_payload(IkeRole::Responder, &nr);
            s.transcript_msg1 = frame_ike(&reply)?;
            s.state = IkeState::SaInitReceived;
            Ok(reply)
        })
    }

    /// Initiator processing of the SA_INIT response.
    pub fn handle_sa_init(&mut self, msg: &IkePayload) -> Result<(), IkeError> {
        self.require(IkeState::SaInitSent)?;
        self.guarded(|s| {
            let (nr, ke) = s.check_sa_init(msg, IkeRole::Responder)?;
            if msg.spi_i != s.spi_i {
                return Err(IkeError::Unexpected("initiator SPI mismatch"));
            }
            s.peer_sa_init = frame_ike(msg)?;
            s.spi_r = msg.spi_r;
            s.nonce_r = Some(nr);
            s.compute_keys(&ke)?;
            s.state = IkeState::SaInitReceived;
            Ok(())
        })
    }

    fn keys_for(&self, sender: IkeRole) -> (&crypto::AeadKey, &[u8; 32]) {
        let ks = self.schedule.as_ref().expect("schedule present");
        match sender {
            IkeRole::Initiator => (&ks.sk_ei, &ks.sk_pi),
            IkeRole::Responder => (&ks.sk_er, &ks.sk_pr),
        }
    }

    /// `SA_INIT(sender) | nonce of the other side | prf(SK_p(sender), id)`.
    fn signed_octets(&self, sender: IkeRole, id: &[u8]) -> Vec<u8> {
        let (sa_init, other_nonce) = if sender == self.role {
            (&self.transcript_msg1, self.peer_nonce())
        } else {
            (&self.peer_sa_init, self.own_nonce())
        };
        let (_, sk_p) = self.keys_for(sender);
        let mut out = sa_init.clone();
        out.extend_from_slice(&other_nonce);
        out.extend_from_slice(&crypto::prf(sk_p, id));
        out
    }

    fn own_nonce(&self) -> [u8; NONCE_LEN] {
        match self.role {
            IkeRole::Initiator => self.nonce_i,
            IkeRole::Responder => self.nonce_r,
        }
        .expect("nonce set")
    }

    fn peer_nonce(&self) -> [u8; NONCE_LEN] {
        match self.role {
            IkeRole::Initiator => self.nonce_r,
            IkeRole::Responder => self.nonce_i,
        }
        .expect("nonce set")
    }

    fn psk_auth(psk: &[u8], octets: &[u8]) -> [u8; 32] {
        crypto::prf(&crypto::prf(psk, KEY_PAD), octets)
    }

    fn auth_message<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Result<IkePayload, IkeError> {
        let octets = self.signed_octets(self.role, &self.own_id);
        let auth = match &self.credential {
            Credential::Psk(psk) => Self::psk_auth(psk, &octets).to_vec(),
            Credential::Signature { own, .. } => crypto::sign(own, &octets),
        };
        let mut msg = IkePayload {
            exchange_type: ExchangeType::Auth,
            role: self.role,
            spi_i: self.spi_i,
            spi_r: self.spi_r,
            body: vec![
                (SegmentTag::Id, self.own_id.clone()),
                (SegmentTag::Auth, Vec::new()),
                (SegmentTag::SaChild, self.local_child_spi.to_be_bytes().to_vec()),
                (SegmentTag::Tsi, self.ts_i.clone()),
                (SegmentTag::Tsr, self.ts_r.clone()),
            ],
        };
        let aad = frame_ike(&msg)?;
        let mut iv = [0u8; IV_LEN];
        rng.fill_bytes(&mut iv);
        let (sk_e, _) = self.keys_for(self.role);
        let mut sealed = iv.to_vec();
        sealed.extend(crypto::aead_seal(sk_e, &iv, &aad, &auth));
        msg.body[1].1 = sealed;
        Ok(msg)
    }

    fn verify_auth(&mut self, msg: &IkePayload) -> Result<(), IkeError> {
        let peer_role = match self.role {
            IkeRole::Initiator => IkeRole::Responder,
            IkeRole::Responder => IkeRole::Initiator,
        };
        if msg.exchange_type != ExchangeType::Auth || msg.role != peer_role {
            return Err(IkeError::Unexpected("not an AUTH from the peer"));
        }
        if msg.spi_i != self.spi_i || msg.spi_r != self.spi_r {
            return Err(IkeError::Unexpected("IKE SPI mismatch"));
        }
        let mut blank = msg.clone();
        let mut sealed = None;
        for (tag, v) in blank.body.iter_mut() {
            if *tag == SegmentTag::Auth {
                sealed = Some(std::mem::take(v));
            }
        }
        let sealed = sealed.ok_or(IkeError::AuthFail)?;
        if sealed.len() < IV_LEN {
            return Err(IkeError::AuthFail);
        }
        let iv: [u8; IV_LEN] = sealed[..IV_LEN].try_into().expect("8 bytes");
        let aad = frame_ike(&blank)?;
        let (sk_e, _) = self.keys_for(peer_role);
        let auth = crypto::aead_open(sk_e, &iv, &aad, &sealed[IV_LEN..])
            .map_err(|_| IkeError::AuthFail)?;

        let id = msg.segment(SegmentTag::Id).ok_or(IkeError::AuthFail)?;
        if id != self.peer_id.as_slice() {
            return Err(IkeError::AuthFail);
        }
        let octets = self.signed_octets(peer_role, id);
        let ok = match &self.credential {
            Credential::Psk(psk) => {
                let expect = Self::psk_auth(psk, &octets);
                auth.len() == expect.len()
                    && auth.iter().zip(expect).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
            }
            Credential::Signature { peer_public, .. } => crypto::verify(peer_public, &octets, &auth),
        };
        if !ok {
            return Err(IkeError::AuthFail);
        }
        let spi = msg
            .segment(SegmentTag::SaChild)
            .and_then(|b| <[u8; 4]>::try_from(b).ok())
            .map(u32::from_be_bytes)
            .filter(|&s| s != 0)
            .ok_or(IkeError::Unexpected("sa_child must carry a non-zero 4-byte SPI"))?;
        self.peer_child_spi = Some(spi);
        self.peer_authenticated = true;
        Ok(())
    }

    fn establish(&mut self) -> Result<(), IkeError> {
        let ks = self.schedule.as_ref().expect("schedule present");
        let (ni, nr) = self.nonces().expect("nonces");
        let seed = [ni.as_slice(), nr.as_slice()].concat();
        self.child_keymat = Some(crypto::prf_plus(&ks.sk_d, &seed, CHILD_KEYMAT_LEN)?);
        self.state = IkeState::Established;
        Ok(())
    }

    /// Initiator AUTH request.
    pub fn send_auth<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Result<IkePayload, IkeError> {
        self.require(IkeState::SaInitReceived)?;
        self.require_role(IkeRole::Initiator)?;
        let msg = self.auth_message(rng)?;
        self.state = IkeState::AuthSent;
        Ok(msg)
    }

    /// Responder: verifies the AUTH request and answers with its own AUTH.
    pub fn respond_auth<R: RngCore + CryptoRng>(
        &mut self,
        msg: &IkePayload,
        rng: &mut R,
    ) -> Result<IkePayload, IkeError> {
        self.require(IkeState::SaInitReceived)?;
        self.require_role(IkeRole::Responder)?;
        self.guarded(|s| {
            s.verify_auth(msg)?;
            let reply = s.auth_message(rng)?;
            s.establish()?;
            Ok(reply)
        })
    }

    /// Initiator processing of the AUTH response.
    pub fn handle_auth(&mut self, msg: &IkePayload) -> Result<(), IkeError> {
        self.require(IkeState::AuthSent)?;
        self.guarded(|s| {
            s.verify_auth(msg)?;
            s.establish()
        })
    }

    /// Marks the session failed, e.g. after retransmissions ran out.
    pub fn fail(&mut self) {
        self.state = IkeState::Failed;
        self.schedule = None;
        self.child_keymat = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::parse_ike;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn psk_pair(psk_i: &[u8], psk_r: &[u8]) -> (IkeSession, IkeSession) {
        let cfg = |role, cred: Vec<u8>, own: &str, peer: &str, spi| IkeConfig {
            role,
            credential: Credential::Psk(cred),
            pop_key: None,
            own_id: own.as_bytes().to_vec(),
            peer_id: peer.as_bytes().to_vec(),
            child_spi: spi,
            ts_i: b"rs".to_vec(),
            ts_r: b"client".to_vec(),
        };
        (
            IkeSession::new(cfg(IkeRole::Initiator, psk_i.to_vec(), "rs", "client", 100)),
            IkeSession::new(cfg(IkeRole::Responder, psk_r.to_vec(), "client", "rs", 200)),
        )
    }

    fn run(i: &mut IkeSession, r: &mut IkeSession, rng: &mut ChaCha20Rng) -> Result<(), IkeError> {
        let m1 = i.initiate(rng)?;
        let m2 = r.respond_sa_init(&m1, rng)?;
        i.handle_sa_init(&m2)?;
        let m3 = i.send_auth(rng)?;
        let m4 = r.respond_auth(&m3, rng)?;
        i.handle_auth(&m4)
    }

    #[test]
    fn psk_handshake_agrees() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (mut i, mut r) = psk_pair(b"secret", b"secret");
        run(&mut i, &mut r, &mut rng).unwrap();
        assert_eq!(i.state(), IkeState::Established);
        assert_eq!(r.state(), IkeState::Established);
        assert_eq!(i.schedule(), r.schedule());
        assert_eq!(i.child_keys(), r.child_keys());
        assert_eq!(i.peer_child_spi(), Some(200));
        assert_eq!(r.peer_child_spi(), Some(100));
    }

    #[test]
    fn psk_mismatch_fails_at_responder() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (mut i, mut r) = psk_pair(b"secret", b"other");
        assert_eq!(run(&mut i, &mut r, &mut rng), Err(IkeError::AuthFail));
        assert_eq!(r.state(), IkeState::Failed);
        assert!(r.child_keymat().is_none());
    }

    #[test]
    fn signature_handshake_and_swapped_keys() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let rs_key = SignKeyPair::generate(&mut rng);
        let c_key = SignKeyPair::generate(&mut rng);
        let make = |own: &SignKeyPair, peer: &SignKeyPair, role, id: &str, pid: &str| {
            IkeSession::new(IkeConfig {
                role,
                credential: Credential::Signature {
                    own: own.clone(),
                    peer_public: peer.public().to_vec(),
                },
                pop_key: None,
                own_id: id.into(),
                peer_id: pid.into(),
                child_spi: 7,
                ts_i: vec![],
                ts_r: vec![],
            })
        };
        let mut i = make(&rs_key, &c_key, IkeRole::Initiator, "rs", "c");
        let mut r = make(&c_key, &rs_key, IkeRole::Responder, "c", "rs");
        run(&mut i, &mut r, &mut rng).unwrap();
        assert_eq!(i.child_keys(), r.child_keys());
        assert_eq!(i.auth_mode(), AuthMode::Signature);

        // responder expects the wrong initiator key
        let mut i = make(&rs_key, &c_key, IkeRole::Initiator, "rs", "c");
        let mut r = make(&c_key, &c_key, IkeRole::Responder, "c", "rs");
        assert_eq!(run(&mut i, &mut r, &mut rng), Err(IkeError::AuthFail));
    }

    #[test]
    fn wrong_state_and_role() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (mut i, mut r) = psk_pair(b"k", b"k");
        let m1 = i.initiate(&mut rng).unwrap();
        assert_eq!(m1.spi_r, [0; 8]);
        assert_ne!(m1.spi_i, [0; 8]);
        assert_eq!(i.initiate(&mut rng), Err(IkeError::WrongState(IkeState::SaInitSent)));
        assert!(r.initiate(&mut rng).is_err());
        assert!(matches!(r.send_auth(&mut rng), Err(IkeError::WrongState(_))));
        assert_eq!(i.state(), IkeState::SaInitSent);
    }

    #[test]
    fn unknown_cipher_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (mut i, mut r) = psk_pair(b"k", b"k");
        let mut m1 = i.initiate(&mut rng).unwrap();
        m1.body[0].1 = encode_proposal(&[12, 5, 19]);
        assert_eq!(r.respond_sa_init(&m1, &mut rng), Err(IkeError::BadProposal));
        assert_eq!(r.state(), IkeState::Failed);
    }

    #[test]
    fn fresh_randomness_gives_fresh_keys() {
        let (mut i1, mut r1) = psk_pair(b"k", b"k");
        let (mut i2, mut r2) = psk_pair(b"k", b"k");
        run(&mut i1, &mut r1, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        run(&mut i2, &mut r2, &mut ChaCha20Rng::seed_from_u64(6)).unwrap();
        assert_ne!(i1.child_keymat(), i2.child_keymat());
        assert_ne!(i1.nonces().unwrap().0, i2.nonces().unwrap().0);
    }

    #[test]
    fn sealed_auth_segment_round_trips_framing() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (mut i, mut r) = psk_pair(b"k", b"k");
        let m1 = i.initiate(&mut rng).unwrap();
        let m2 = r.respond_sa_init(&m1, &mut rng).unwrap();
        i.handle_sa_init(&m2).unwrap();
        let m3 = i.send_auth(&mut rng).unwrap();
        let bytes = frame_ike(&m3).unwrap();
        let back = parse_ike(&bytes).unwrap();
        assert_eq!(back, m3);
        assert!(r.respond_auth(&back, &mut rng).is_ok());
    }

    fn sig_pair(rng: &mut ChaCha20Rng) -> (IkeSession, IkeSession) {
        let rs_key = SignKeyPair::generate(rng);
        let c_key = SignKeyPair::generate(rng);
        let make = |own: &SignKeyPair, peer: &SignKeyPair, role, id: &str, pid: &str, spi| {
            IkeSession::new(IkeConfig {
                role,
                credential: Credential::Signature {
                    own: own.clone(),
                    peer_public: peer.public().to_vec(),
                },
                pop_key: None,
                own_id: id.into(),
                peer_id: pid.into(),
                child_spi: spi,
                ts_i: b"rs".to_vec(),
                ts_r: b"client".to_vec(),
            })
        };
        (
            make(&rs_key, &c_key, IkeRole::Initiator, "rs", "client", 100),
            make(&c_key, &rs_key, IkeRole::Responder, "client", "rs", 200),
        )
    }

    /// Runs a handshake over framed bytes, flipping `bit` of message `which`.
    /// Returns true when both ends end up established with the same keys.
    fn run_tampered(
        i: &mut IkeSession,
        r: &mut IkeSession,
        rng: &mut ChaCha20Rng,
        which: usize,
        bit: usize,
    ) -> bool {
        let wire = |n: usize, m: IkePayload| -> Option<IkePayload> {
            let mut b = frame_ike(&m).unwrap();
            if n == which {
                let bit = bit % (b.len() * 8);
                b[bit / 8] ^= 1 << (bit % 8);
            }
            parse_ike(&b).ok()
        };
        let mut attempt = || -> Option<()> {
            let m1 = wire(0, i.initiate(rng).ok()?)?;
            let m2 = wire(1, r.respond_sa_init(&m1, rng).ok()?)?;
            i.handle_sa_init(&m2).ok()?;
            let m3 = wire(2, i.send_auth(rng).ok()?)?;
            let m4 = wire(3, r.respond_auth(&m3, rng).ok()?)?;
            i.handle_auth(&m4).ok()
        };
        let _ = attempt();
        i.state() == IkeState::Established
            && r.state() == IkeState::Established
            && i.schedule() == r.schedule()
            && i.child_keys() == r.child_keys()
    }

    #[test]
    fn untampered_wire_run_establishes() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (mut i, mut r) = psk_pair(b"k", b"k");
        assert!(run_tampered(&mut i, &mut r, &mut rng, usize::MAX, 0));
        let (mut i, mut r) = sig_pair(&mut rng);
        assert!(run_tampered(&mut i, &mut r, &mut rng, usize::MAX, 0));
    }

    #[test]
    fn every_bit_of_a_psk_handshake_matters() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for which in 0..4 {
            let (mut i, mut r) = psk_pair(b"k", b"k");
            let mut probe = ChaCha20Rng::seed_from_u64(10);
            let len = {
                let m1 = i.initiate(&mut probe).unwrap();
                let m2 = r.respond_sa_init(&m1, &mut probe).unwrap();
                i.handle_sa_init(&m2).unwrap();
                let m3 = i.send_auth(&mut probe).unwrap();
                let m4 = r.respond_auth(&m3, &mut probe).unwrap();
                frame_ike(&[m1, m2, m3, m4][which]).unwrap().len()
            };
            for bit in 0..len * 8 {
                let (mut i, mut r) = psk_pair(b"k", b"k");
                assert!(!run_tampered(&mut i, &mut r, &mut rng, which, bit), "msg {which} bit {bit}");
            }
        }
    }

    #[test]
    fn dh_secret_never_on_the_wire() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (mut i, mut r) = sig_pair(&mut rng);
        let m1 = i.initiate(&mut rng).unwrap();
        let m2 = r.respond_sa_init(&m1, &mut rng).unwrap();
        i.handle_sa_init(&m2).unwrap();
        let m3 = i.send_auth(&mut rng).unwrap();
        let m4 = r.respond_auth(&m3, &mut rng).unwrap();
        i.handle_auth(&m4).unwrap();
        let wire: Vec<u8> = [m1, m2, m3, m4].iter().flat_map(|m| frame_ike(m).unwrap()).collect();
        for s in [&i, &r] {
            let secret = s.dh.as_ref().unwrap().secret_bytes();
            let shared = s.shared_secret().unwrap();
            for needle in [secret.as_slice(), shared.as_slice()] {
                assert!(!wire.windows(needle.len()).any(|w| w == needle));
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn any_single_bit_flip_prevents_matching_keys(seed: u64, sig: bool, which in 0usize..4, bit: usize) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (mut i, mut r) = if sig { sig_pair(&mut rng) } else { psk_pair(b"k", b"k") };
            proptest::prop_assert!(!run_tampered(&mut i, &mut r, &mut rng, which, bit));
        }
    }
}

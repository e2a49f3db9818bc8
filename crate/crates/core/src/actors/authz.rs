//! Authorization Server: `/token`, `/introspect` and `/release-spi`.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::{step, Endpoint, Event, Node, Outbound, PATH_INTROSPECT, PATH_RELEASE_SPI, PATH_TOKEN};
use crate::codec::{decode_cbor, encode_cbor, CborValue, Code, Envelope};
use crate::config::PolicyRule;
use crate::crypto::{cert, AeadKey};
use crate::net::Datagram;
use crate::token::{
    self, AccessToken, CoseKeyClaim, IntrospectionResponse, IpsecMode, IpsecStruct, KeyType,
    Method, RsInformation, SecurityProtocol, TokenRequest, KMP_IKEV2, PROFILE_IPSEC, PSK_LEN,
    SEED_LEN,
};

/// Profile name of tokens issued to RSs without the IPsec profile.
pub const PROFILE_BASE: &str = "ace-base";
const KID_LEN: usize = 8;
const CTI_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IssueError {
    #[error("policy denies the request")]
    PolicyDeny,
    #[error("unknown client {0:?}")]
    UnknownClient(String),
    #[error("unknown resource server {0:?}")]
    UnknownRs(String),
    #[error("SPI pool exhausted")]
    PoolExhausted,
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl IssueError {
    pub fn code(&self) -> Code {
        match self {
            IssueError::PolicyDeny | IssueError::UnknownClient(_) => Code::Unauthorized,
            IssueError::UnknownRs(_) | IssueError::BadRequest(_) => Code::BadRequest,
            IssueError::PoolExhausted => Code::Conflict,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestoreOutcome {
    Restored,
    AlreadyAvailable,
    NotFromPool,
}

/// SPI values reserved in advance at the RS for SA-C.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpiPool {
    reserved: BTreeSet<u32>,
    available: BTreeSet<u32>,
}

impl SpiPool {
    pub fn new(values: impl IntoIterator<Item = u32>) -> Self {
        let reserved: BTreeSet<u32> = values.into_iter().filter(|&v| v != 0).collect();
        SpiPool {
            available: reserved.clone(),
            reserved,
        }
    }

    pub fn range(start: u32, size: u32) -> Self {
        Self::new((0..size).map(|i| start + i))
    }

    /// Uniform draw among the available values.
    pub fn draw<R: Rng>(&mut self, rng: &mut R) -> Result<u32, IssueError> {
        if self.available.is_empty() {
            return Err(IssueError::PoolExhausted);
        }
        let i = rng.gen_range(0..self.available.len());
        let v = *self.available.iter().nth(i).expect("index in range");
        self.available.remove(&v);
        Ok(v)
    }

    pub fn restore(&mut self, spi: u32) -> RestoreOutcome {
        if !self.reserved.contains(&spi) {
            RestoreOutcome::NotFromPool
        } else if self.available.insert(spi) {
            RestoreOutcome::Restored
        } else {
            RestoreOutcome::AlreadyAvailable
        }
    }

    pub fn contains(&self, spi: u32) -> bool {
        self.reserved.contains(&spi)
    }

    pub fn available(&self) -> usize {
        self.available.len()
    }

    pub fn is_available(&self, spi: u32) -> bool {
        self.available.contains(&spi)
    }
}

/// What the AS knows about one RS.
#[derive(Debug, Clone)]
pub struct RsRegistration {
    pub id: String,
    pub seal_key: AeadKey,
    /// `None`: the RS does not use the IPsec profile.
    pub method: Option<Method>,
    /// RS public key as handed to Clients for `IkeAsym`.
    pub public_key: Option<CoseKeyClaim>,
    pub mode: IpsecMode,
    pub protocol: SecurityProtocol,
    pub sa_lifetime_s: u64,
    pub tunnel_src: Option<Vec<u8>>,
    pub tunnel_dst: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct ClientRegistration {
    pub id: String,
    /// Raw public key registered out of band; checked against raw keys in
    /// token requests. Certificates are checked against the AS's own CA.
    pub public_key: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct AsSetup {
    pub name: String,
    pub rs: Vec<RsRegistration>,
    pub clients: Vec<ClientRegistration>,
    pub policy: Vec<PolicyRule>,
    pub token_lifetime_s: u64,
    pub spi_pool: Option<SpiPool>,
    /// Root key that client certificate chains must reach.
    pub trust_anchor: Vec<u8>,
    /// Refuse requests that did not arrive over ESP.
    pub require_protection: bool,
}

#[derive(Debug, Clone)]
struct Issued {
    rs: String,
    token: AccessToken,
    rs_info: RsInformation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AsStats {
    pub tokens_issued: u64,
    pub spi_updates: u64,
    pub denied: u64,
    pub introspections: u64,
    pub restored: u64,
}

#[derive(Debug)]
pub struct AuthorizationServer {
    setup: AsSetup,
    pub endpoint: Endpoint,
    rng: ChaCha20Rng,
    pool: Option<SpiPool>,
    psks: HashMap<(String, Vec<u8>), [u8; PSK_LEN]>,
    client_keys: HashMap<(String, Vec<u8>), CoseKeyClaim>,
    issued: HashMap<Vec<u8>, Issued>,
    last_issued: HashMap<(String, String), Vec<u8>>,
    forced_spis: VecDeque<(u32, u32)>,
    pub stats: AsStats,
}

fn random_nonzero_u32<R: RngCore>(rng: &mut R) -> u32 {
    loop {
        let v = rng.next_u32();
        if v != 0 {
            return v;
        }
    }
}

fn random_bytes<R: RngCore, const N: usize>(rng: &mut R) -> [u8; N] {
    let mut b = [0u8; N];
    rng.fill_bytes(&mut b);
    b
}

impl AuthorizationServer {
    pub fn new(mut setup: AsSetup, endpoint: Endpoint, seed: [u8; 32]) -> Self {
        let pool = setup.spi_pool.take();
        AuthorizationServer {
            setup,
            endpoint,
            rng: ChaCha20Rng::from_seed(seed),
            pool,
            psks: HashMap::new(),
            client_keys: HashMap::new(),
            issued: HashMap::new(),
            last_issued: HashMap::new(),
            forced_spis: VecDeque::new(),
            stats: AsStats::default(),
        }
    }

    pub fn pool(&self) -> Option<&SpiPool> {
        self.pool.as_ref()
    }

    /// Makes the next direct-provisioning issuance use these SPIs.
    pub fn force_next_spis(&mut self, spi_c: u32, spi_rs: u32) {
        self.forced_spis.push_back((spi_c, spi_rs));
    }

    /// SPI pair for a DP token: `spi_sa_c` from the pool when enabled.
    pub fn draw_dp_spis(&mut self) -> Result<(u32, u32), IssueError> {
        if let Some(forced) = self.forced_spis.pop_front() {
            return Ok(forced);
        }
        let spi_c = match &mut self.pool {
            Some(p) => p.draw(&mut self.rng)?,
            None => random_nonzero_u32(&mut self.rng),
        };
        let spi_rs = loop {
            let v = random_nonzero_u32(&mut self.rng);
            let in_pool = self.pool.as_ref().is_some_and(|p| p.contains(v));
            if v != spi_c && !in_pool {
                break v;
            }
        };
        Ok((spi_c, spi_rs))
    }

    pub fn restore_spi(&mut self, spi: u32) -> RestoreOutcome {
        let outcome = match &mut self.pool {
            Some(p) => p.restore(spi),
            None => RestoreOutcome::NotFromPool,
        };
        match outcome {
            RestoreOutcome::Restored => self.stats.restored += 1,
            RestoreOutcome::NotFromPool => log::warn!("SPI {spi:#010x} released but not from the pool"),
            RestoreOutcome::AlreadyAvailable => {}
        }
        outcome
    }

    fn rs(&self, id: &str) -> Result<&RsRegistration, IssueError> {
        self.setup
            .rs
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| IssueError::UnknownRs(id.into()))
    }

    fn policy_allows(&self, client: &str, audience: &str, scope: &str) -> bool {
        let wanted: Vec<&str> = scope.split_whitespace().collect();
        !wanted.is_empty()
            && self.setup.policy.iter().any(|p| {
                p.client == client
                    && p.audience == audience
                    && wanted.iter().all(|w| p.scopes.iter().any(|s| s == w))
            })
    }

    fn ipsec_base(&self, rs: &RsRegistration) -> IpsecStruct {
        IpsecStruct {
            spi_sa_c: None,
            spi_sa_rs: None,
            mode: rs.mode,
            protocol: rs.protocol,
            seed: None,
            lifetime_s: rs.sa_lifetime_s,
            tunnel_src: rs.tunnel_src.clone(),
            tunnel_dst: rs.tunnel_dst.clone(),
        }
    }

    /// Client PoP key for the asymmetric method, from the request or from
    /// an earlier contact.
    fn client_ec_key(&mut self, req: &TokenRequest, now: u64) -> Result<CoseKeyClaim, IssueError> {
        let claim = req
            .req_cnf
            .as_ref()
            .ok_or_else(|| IssueError::BadRequest("asymmetric method needs req_cnf".into()))?;
        if claim.kty != KeyType::Ec {
            return Err(IssueError::BadRequest("req_cnf must be an EC key".into()));
        }
        let key = (req.client_id.clone(), claim.kid.clone());
        if claim.key_bytes.is_none() {
            return self
                .client_keys
                .get(&key)
                .cloned()
                .ok_or_else(|| IssueError::BadRequest("unknown kid".into()));
        }
        match claim.chain.is_empty() {
            false => {
                cert::verify_chain(&claim.chain, &self.setup.trust_anchor, Some(&req.client_id), now)
                    .map_err(|e| IssueError::BadRequest(e.to_string()))?;
            }
            true => {
                let registered = self
                    .setup
                    .clients
                    .iter()
                    .find(|c| c.id == req.client_id)
                    .and_then(|c| c.public_key.as_ref());
                if registered != claim.key_bytes.as_ref() {
                    return Err(IssueError::BadRequest("raw key does not match registration".into()));
                }
            }
        }
        self.client_keys.insert(key, claim.clone());
        Ok(claim.clone())
    }

    fn client_psk(&mut self, req: &TokenRequest) -> Result<CoseKeyClaim, IssueError> {
        if let Some(r) = &req.req_cnf {
            if r.kty != KeyType::Symmetric || r.key_bytes.is_some() {
                return Err(IssueError::BadRequest("symmetric req_cnf must be a kid reference".into()));
            }
            let psk = self
                .psks
                .get(&(req.client_id.clone(), r.kid.clone()))
                .ok_or_else(|| IssueError::BadRequest("unknown kid".into()))?;
            return Ok(CoseKeyClaim::symmetric(r.kid.clone(), *psk));
        }
        let kid = random_bytes::<_, KID_LEN>(&mut self.rng).to_vec();
        let psk = random_bytes::<_, PSK_LEN>(&mut self.rng);
        self.psks.insert((req.client_id.clone(), kid.clone()), psk);
        Ok(CoseKeyClaim::symmetric(kid, psk))
    }

    /// Builds, seals and records a token for `req`.
    pub fn issue(&mut self, req: &TokenRequest, now: u64) -> Result<RsInformation, IssueError> {
        if !self.setup.clients.iter().any(|c| c.id == req.client_id) {
            return Err(IssueError::UnknownClient(req.client_id.clone()));
        }
        let rs = self.rs(&req.audience)?.clone();
        if !self.policy_allows(&req.client_id, &req.audience, &req.scope) {
            self.stats.denied += 1;
            return Err(IssueError::PolicyDeny);
        }
        if let Some(spi) = req.spi_sa_rs {
            return self.update_spi(req, spi);
        }

        let (profile, kmp, ipsec, cnf, rs_cnf) = match rs.method {
            None => (PROFILE_BASE, None, None, None, None),
            Some(Method::Dp) => {
                let (spi_c, spi_rs) = self.draw_dp_spis()?;
                let mut s = self.ipsec_base(&rs);
                s.spi_sa_c = Some(spi_c);
                s.spi_sa_rs = Some(spi_rs);
                s.seed = Some(random_bytes::<_, SEED_LEN>(&mut self.rng));
                (PROFILE_IPSEC, None, Some(s), None, None)
            }
            Some(Method::IkePsk) => {
                let psk = self.client_psk(req)?;
                let s = self.ipsec_base(&rs);
                (PROFILE_IPSEC, Some(KMP_IKEV2), Some(s), Some(psk.clone()), Some(psk))
            }
            Some(Method::IkeAsym) => {
                let client_key = self.client_ec_key(req, now)?;
                let rs_key = rs
                    .public_key
                    .clone()
                    .ok_or_else(|| IssueError::UnknownRs(format!("{} has no public key", rs.id)))?;
                let s = self.ipsec_base(&rs);
                (PROFILE_IPSEC, Some(KMP_IKEV2), Some(s), Some(client_key), Some(rs_key))
            }
        };
        let t = AccessToken {
            iss: self.setup.name.clone(),
            aud: rs.id.clone(),
            client_id: req.client_id.clone(),
            scope: req.scope.clone(),
            exp: now + self.setup.token_lifetime_s,
            cti: random_bytes::<_, CTI_LEN>(&mut self.rng).to_vec(),
            profile: profile.into(),
            kmp: kmp.map(str::to_owned),
            ipsec: ipsec.clone(),
            cnf,
            state: None,
        };
        if rs.method.is_some() {
            debug_assert_eq!(token::validate_method_signaling(&t).ok(), rs.method);
        }
        let token_bytes = token::seal_token(&t, &rs.seal_key, &mut self.rng)
            .map_err(|e| IssueError::BadRequest(e.to_string()))?;
        let info = RsInformation {
            profile: profile.into(),
            kmp: kmp.map(str::to_owned),
            ipsec,
            cnf: rs_cnf,
            token_bytes,
        };
        self.stats.tokens_issued += 1;
        self.last_issued
            .insert((req.client_id.clone(), rs.id.clone()), t.cti.clone());
        self.issued.insert(
            t.cti.clone(),
            Issued {
                rs: rs.id.clone(),
                token: t,
                rs_info: info.clone(),
            },
        );
        Ok(info)
    }

    /// Second request after a collision at the Client: the previous token
    /// changes only in `spi_sa_rs`.
    fn update_spi(&mut self, req: &TokenRequest, spi_rs: u32) -> Result<RsInformation, IssueError> {
        let cti = self
            .last_issued
            .get(&(req.client_id.clone(), req.audience.clone()))
            .cloned()
            .ok_or_else(|| IssueError::BadRequest("no token to update".into()))?;
        let prev = self.issued.get(&cti).expect("recorded at issuance").clone();
        let mut t = prev.token.clone();
        let ipsec = t
            .ipsec
            .as_mut()
            .filter(|s| s.seed.is_some())
            .ok_or_else(|| IssueError::BadRequest("SPI update needs a DP token".into()))?;
        if ipsec.spi_sa_c == Some(spi_rs) {
            return Err(IssueError::BadRequest("spi_sa_rs equals spi_sa_c".into()));
        }
        ipsec.spi_sa_rs = Some(spi_rs);
        let rs = self.rs(&prev.rs)?.clone();
        let token_bytes = token::seal_token(&t, &rs.seal_key, &mut self.rng)
            .map_err(|e| IssueError::BadRequest(e.to_string()))?;
        let mut info = prev.rs_info.clone();
        info.ipsec = t.ipsec.clone();
        info.token_bytes = token_bytes;
        self.stats.spi_updates += 1;
        self.issued.insert(
            cti,
            Issued {
                rs: prev.rs,
                token: t,
                rs_info: info.clone(),
            },
        );
        Ok(info)
    }

    /// Introspection on behalf of RS `rs_id`.
    pub fn introspect(&mut self, rs_id: &str, token_bytes: &[u8], now: u64) -> IntrospectionResponse {
        self.stats.introspections += 1;
        let Ok(rs) = self.rs(rs_id) else {
            return IntrospectionResponse::inactive();
        };
        let Ok(t) = token::open_token(token_bytes, &rs.seal_key, now) else {
            return IntrospectionResponse::inactive();
        };
        match self.issued.get(&t.cti) {
            Some(i) if i.rs == rs_id && i.token == t => IntrospectionResponse {
                active: true,
                scope: Some(t.scope),
                exp: Some(t.exp),
                cnf: t.cnf,
            },
            _ => IntrospectionResponse::inactive(),
        }
    }

    /// Claims of an issued token, by token id.
    pub fn issued_token(&self, cti: &[u8]) -> Option<&AccessToken> {
        self.issued.get(cti).map(|i| &i.token)
    }

    fn on_request(&mut self, now_ms: u64, from: String, env: Envelope, spi: Option<u32>, out: &mut Vec<Outbound>) {
        let now = self.endpoint.unix(now_ms);
        if self.setup.require_protection && spi.is_none() {
            self.endpoint
                .respond(now_ms, &from, &env, Code::Unauthorized, vec![], step::ERROR, out);
            return;
        }
        match (env.code, env.uri_path.as_str()) {
            (Code::Post, PATH_TOKEN) => {
                let result = TokenRequest::decode(&env.payload)
                    .map_err(|e| IssueError::BadRequest(e.to_string()))
                    .and_then(|req| {
                        if req.client_id != from {
                            return Err(IssueError::UnknownClient(req.client_id));
                        }
                        self.issue(&req, now)
                    });
                match result.and_then(|info| info.encode().map_err(|e| IssueError::BadRequest(e.to_string()))) {
                    Ok(payload) => self.endpoint.respond(now_ms, &from, &env, Code::Created, payload, step::B, out),
                    Err(e) => {
                        log::info!("{}: token request from {from} refused: {e}", self.setup.name);
                        self.endpoint
                            .respond(now_ms, &from, &env, e.code(), e.to_string().into_bytes(), step::B, out)
                    }
                }
            }
            (Code::Post, PATH_INTROSPECT) => {
                let r = self.introspect(&from, &env.payload, now);
                let payload = r.encode().expect("introspection response encodes");
                self.endpoint
                    .respond(now_ms, &from, &env, Code::Content, payload, step::E, out);
            }
            (Code::Post, PATH_RELEASE_SPI) => {
                let spi = decode_cbor(&env.payload)
                    .ok()
                    .and_then(|v| v.get("spi").and_then(CborValue::as_u64))
                    .and_then(|v| u32::try_from(v).ok());
                let code = match spi {
                    Some(spi) => {
                        self.restore_spi(spi);
                        Code::Created
                    }
                    None => Code::BadRequest,
                };
                self.endpoint
                    .respond(now_ms, &from, &env, code, vec![], step::RELEASE_ACK, out);
            }
            _ => self
                .endpoint
                .respond(now_ms, &from, &env, Code::BadRequest, vec![], step::ERROR, out),
        }
    }
}

/// Payload of a `/release-spi` request.
pub fn release_payload(spi: u32) -> Vec<u8> {
    encode_cbor(&CborValue::Map(vec![("spi".into(), (spi as u64).into())]))
        .expect("static shape encodes")
}

impl Node for AuthorizationServer {
    fn name(&self) -> &str {
        &self.setup.name
    }

    fn handle(&mut self, now_ms: u64, d: Datagram, out: &mut Vec<Outbound>) {
        if let Some(Event::Request { from, env, spi }) = self.endpoint.receive(now_ms, d, out) {
            self.on_request(now_ms, from, env, spi, out);
        }
    }

    fn tick(&mut self, now_ms: u64, out: &mut Vec<Outbound>) {
        self.endpoint.tick(now_ms, out);
    }

    fn next_timer(&self) -> Option<u64> {
        self.endpoint.next_timer()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn pool_draw_restore_cycle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut p = SpiPool::range(100, 2);
        let a = p.draw(&mut rng).unwrap();
        let b = p.draw(&mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(p.draw(&mut rng), Err(IssueError::PoolExhausted));
        assert_eq!(p.restore(a), RestoreOutcome::Restored);
        assert_eq!(p.restore(a), RestoreOutcome::AlreadyAvailable);
        assert_eq!(p.restore(7), RestoreOutcome::NotFromPool);
        assert_eq!(p.draw(&mut rng).unwrap(), a);
    }

    #[test]
    fn zero_never_enters_the_pool() {
        let p = SpiPool::new([0, 1, 2]);
        assert_eq!(p.available(), 2);
        assert!(!p.contains(0));
    }

    proptest::proptest! {
        #[test]
        fn pool_tracks_a_plain_set(seed: u64, ops in proptest::collection::vec(proptest::option::of(0u32..6), 0..40)) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut pool = SpiPool::range(100, 4);
            let mut free: BTreeSet<u32> = (100..104).collect();
            for op in ops {
                match op {
                    None => match pool.draw(&mut rng) {
                        Ok(v) => proptest::prop_assert!(free.remove(&v)),
                        Err(e) => {
                            proptest::prop_assert_eq!(e, IssueError::PoolExhausted);
                            proptest::prop_assert!(free.is_empty());
                        }
                    },
                    Some(k) => {
                        let v = 100 + k;
                        let expect = if v >= 104 {
                            RestoreOutcome::NotFromPool
                        } else if free.insert(v) {
                            RestoreOutcome::Restored
                        } else {
                            RestoreOutcome::AlreadyAvailable
                        };
                        proptest::prop_assert_eq!(pool.restore(v), expect);
                    }
                }
                proptest::prop_assert_eq!(pool.available(), free.len());
            }
        }
    }
}

//! Resource Server: validates tokens, sets up SAs and serves resources to
//! authorized peers over ESP.

use std::collections::{BTreeMap, HashMap};
use std::ops::RangeInclusive;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::authz::{release_payload, PROFILE_BASE};
use super::{step, Endpoint, Event, Node, Outbound, PATH_AUTHZ_INFO, PATH_IKE, PATH_INTROSPECT, PATH_RELEASE_SPI};
use crate::codec::{frame_ike, parse_ike, Code, Envelope, IkeRole};
use crate::crypto::{cert, AeadKey, SaKeyPair, SignKeyPair};
use crate::ike::{Credential, IkeConfig, IkeSession, IkeState};
use crate::ipsec::{self, Direction, IpsecError, SaTemplate, SecurityAssociation};
use crate::net::Datagram;
use crate::token::{self, AccessToken, IntrospectionResponse, KeyType, Method, SecurityProtocol};

#[derive(Debug, Clone)]
pub struct RsSetup {
    pub name: String,
    pub as_name: String,
    pub seal_key: AeadKey,
    /// Root key that client certificate chains must reach.
    pub trust_anchor: Vec<u8>,
    /// Key for asymmetric handshakes.
    pub sign_key: Option<SignKeyPair>,
    pub introspection: bool,
    pub release_spis: bool,
    /// SA-C SPIs reserved at the AS pool; released ones go back there.
    pub pool: Option<RangeInclusive<u32>>,
    pub replay_window: u32,
    pub resources: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Clone)]
struct Grant {
    client: String,
    token: AccessToken,
    outbound_spi: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RsStats {
    pub tokens_accepted: u64,
    pub tokens_rejected: u64,
    pub collisions: u64,
    pub resources_served: u64,
    pub denied: u64,
    pub released: u64,
}

#[derive(Debug)]
pub struct ResourceServer {
    setup: RsSetup,
    pub endpoint: Endpoint,
    rng: ChaCha20Rng,
    /// Grants by inbound SPI.
    grants: HashMap<u32, Grant>,
    base_grants: HashMap<String, AccessToken>,
    handshakes: HashMap<String, (IkeSession, AccessToken)>,
    /// `/authz-info` requests waiting for introspection, by D message id.
    parked: HashMap<u16, (String, Envelope)>,
    pub stats: RsStats,
}

impl ResourceServer {
    pub fn new(setup: RsSetup, endpoint: Endpoint, seed: [u8; 32]) -> Self {
        ResourceServer {
            setup,
            endpoint,
            rng: ChaCha20Rng::from_seed(seed),
            grants: HashMap::new(),
            base_grants: HashMap::new(),
            handshakes: HashMap::new(),
            parked: HashMap::new(),
            stats: RsStats::default(),
        }
    }

    /// Token bound to an inbound SA, if any.
    pub fn grant_for(&self, inbound_spi: u32) -> Option<&AccessToken> {
        self.grants.get(&inbound_spi).map(|g| &g.token)
    }

    /// Opens a token with this RS's key without acting on it.
    pub fn read_token(&self, bytes: &[u8], now: u64) -> Result<AccessToken, token::TokenError> {
        token::open_token(bytes, &self.setup.seal_key, now)
    }

    pub fn handshake(&self, client: &str) -> Option<&IkeSession> {
        self.handshakes.get(client).map(|(s, _)| s)
    }

    fn fresh_spi(&mut self) -> u32 {
        loop {
            let v = self.rng.next_u32();
            let in_pool = self.setup.pool.as_ref().is_some_and(|p| p.contains(&v));
            if v != 0 && !in_pool && !self.endpoint.sa_db.inbound_spi_in_use(v) {
                return v;
            }
        }
    }

    fn release(&mut self, now_ms: u64, spi: u32, out: &mut Vec<Outbound>) {
        let from_pool = self.setup.pool.as_ref().is_some_and(|p| p.contains(&spi));
        if self.setup.release_spis && from_pool {
            self.stats.released += 1;
            let to = self.setup.as_name.clone();
            self.endpoint
                .request(now_ms, &to, Code::Post, PATH_RELEASE_SPI, release_payload(spi), step::RELEASE, out);
        }
    }

    /// Removes every SA and grant shared with `peer`.
    fn tear_down(&mut self, now_ms: u64, peer: &str, out: &mut Vec<Outbound>) {
        let spis: Vec<u32> = self
            .grants
            .iter()
            .filter(|(_, g)| g.client == peer)
            .map(|(s, _)| *s)
            .collect();
        for spi in spis {
            let g = self.grants.remove(&spi).expect("listed");
            self.endpoint.sa_db.remove(Direction::Inbound, spi);
            self.endpoint.sa_db.remove(Direction::Outbound, g.outbound_spi);
            self.release(now_ms, spi, out);
        }
        self.base_grants.remove(peer);
    }

    fn install(
        &mut self,
        peer: &str,
        t: &AccessToken,
        inbound: SaTemplate,
        outbound: SaTemplate,
        now: u64,
    ) -> Result<(), IpsecError> {
        let lifetime = t.ipsec.as_ref().map_or(ipsec::DEFAULT_LIFETIME_S, |i| i.lifetime_s);
        let exp = now + lifetime;
        let (i, o) = (inbound.spi, outbound.spi);
        let w = self.setup.replay_window;
        self.endpoint.sa_db.install_pair(
            SecurityAssociation::new(inbound, Direction::Inbound, peer, exp, w),
            SecurityAssociation::new(outbound, Direction::Outbound, peer, exp, w),
            now,
        )?;
        self.grants.insert(
            i,
            Grant {
                client: peer.to_owned(),
                token: t.clone(),
                outbound_spi: o,
            },
        );
        Ok(())
    }

    fn reject(&mut self, now_ms: u64, from: &str, req: &Envelope, code: Code, why: &str, out: &mut Vec<Outbound>) {
        log::info!("{}: token from {from} rejected: {why}", self.setup.name);
        self.stats.tokens_rejected += 1;
        self.endpoint
            .respond(now_ms, from, req, code, why.as_bytes().to_vec(), step::C_ACK, out);
    }

    fn on_authz_info(&mut self, now_ms: u64, from: String, req: Envelope, out: &mut Vec<Outbound>) {
        let now = self.endpoint.unix(now_ms);
        let t = match token::open_token(&req.payload, &self.setup.seal_key, now) {
            Ok(t) => t,
            Err(e) => return self.reject(now_ms, &from, &req, Code::Unauthorized, &e.to_string(), out),
        };
        if t.aud != self.setup.name || t.client_id != from {
            return self.reject(now_ms, &from, &req, Code::Unauthorized, "token not for this exchange", out);
        }
        if t.profile == PROFILE_BASE {
            self.tear_down(now_ms, &from, out);
            self.base_grants.insert(from.clone(), t);
            self.stats.tokens_accepted += 1;
            return self
                .endpoint
                .respond(now_ms, &from, &req, Code::Created, vec![], step::C_ACK, out);
        }
        if t.profile != token::PROFILE_IPSEC {
            return self.reject(now_ms, &from, &req, Code::BadRequest, "unknown profile", out);
        }
        let method = match token::validate_method_signaling(&t) {
            Ok(m) => m,
            Err(e) => return self.reject(now_ms, &from, &req, Code::BadRequest, &e.to_string(), out),
        };
        let ipsec = t.ipsec.clone().expect("signaling checked");
        if ipsec.protocol == SecurityProtocol::Ah {
            return self.reject(now_ms, &from, &req, Code::BadRequest, "AH is not supported", out);
        }
        self.tear_down(now_ms, &from, out);
        match method {
            Method::Dp => {
                let (sa_c, sa_rs) = ipsec::derive_dp_sas(&ipsec).expect("signaling checked");
                match self.install(&from, &t, sa_c, sa_rs, now) {
                    Ok(()) => {
                        self.stats.tokens_accepted += 1;
                        self.endpoint
                            .respond(now_ms, &from, &req, Code::Created, vec![], step::C_ACK, out);
                    }
                    Err(IpsecError::SpiCollision(spi)) => {
                        self.stats.collisions += 1;
                        let why = format!("SPI {spi:#010x} already in use");
                        self.reject(now_ms, &from, &req, Code::Conflict, &why, out)
                    }
                    Err(e) => self.reject(now_ms, &from, &req, Code::BadRequest, &e.to_string(), out),
                }
            }
            Method::IkePsk | Method::IkeAsym => self.start_ike(now_ms, from, req, t, method, out),
        }
    }

    fn start_ike(&mut self, now_ms: u64, from: String, req: Envelope, t: AccessToken, m: Method, out: &mut Vec<Outbound>) {
        let now = self.endpoint.unix(now_ms);
        let cnf = t.cnf.clone().expect("signaling checked");
        let credential = match (m, cnf.kty) {
            (Method::IkePsk, KeyType::Symmetric) => match &cnf.key_bytes {
                Some(k) => Credential::Psk(k.clone()),
                None => return self.reject(now_ms, &from, &req, Code::BadRequest, "PSK missing", out),
            },
            _ => {
                let peer_public = match (cnf.chain.is_empty(), &cnf.key_bytes) {
                    (false, _) => match cert::verify_chain(&cnf.chain, &self.setup.trust_anchor, Some(&t.client_id), now) {
                        Ok(k) => k,
                        Err(e) => {
                            return self.reject(now_ms, &from, &req, Code::Unauthorized, &e.to_string(), out)
                        }
                    },
                    (true, Some(k)) => k.clone(),
                    (true, None) => {
                        return self.reject(now_ms, &from, &req, Code::BadRequest, "client key missing", out)
                    }
                };
                let Some(own) = self.setup.sign_key.clone() else {
                    return self.reject(now_ms, &from, &req, Code::BadRequest, "no signature key", out);
                };
                Credential::Signature { own, peer_public }
            }
        };
        let child_spi = self.fresh_spi();
        let mut session = IkeSession::new(IkeConfig {
            role: IkeRole::Initiator,
            credential,
            pop_key: Some(cnf),
            own_id: self.setup.name.as_bytes().to_vec(),
            peer_id: from.as_bytes().to_vec(),
            child_spi,
            ts_i: self.setup.name.as_bytes().to_vec(),
            ts_r: from.as_bytes().to_vec(),
        });
        let msg = match session.initiate(&mut self.rng).map_err(|e| e.to_string()).and_then(|m| {
            frame_ike(&m).map_err(|e| e.to_string())
        }) {
            Ok(b) => b,
            Err(e) => return self.reject(now_ms, &from, &req, Code::BadRequest, &e, out),
        };
        self.stats.tokens_accepted += 1;
        self.handshakes.insert(from.clone(), (session, t));
        self.endpoint
            .respond(now_ms, &from, &req, Code::Created, msg, step::IKE1, out);
    }

    fn on_ike(&mut self, now_ms: u64, from: String, req: Envelope, out: &mut Vec<Outbound>) {
        let now = self.endpoint.unix(now_ms);
        let Some((session, t)) = self.handshakes.get_mut(&from) else {
            return self
                .endpoint
                .respond(now_ms, &from, &req, Code::BadRequest, vec![], step::ERROR, out);
        };
        let msg = match parse_ike(&req.payload) {
            Ok(m) => m,
            Err(_) => {
                return self
                    .endpoint
                    .respond(now_ms, &from, &req, Code::BadRequest, vec![], step::ERROR, out)
            }
        };
        match session.state() {
            IkeState::SaInitSent => {
                let reply = session
                    .handle_sa_init(&msg)
                    .and_then(|()| session.send_auth(&mut self.rng))
                    .map_err(|e| e.to_string())
                    .and_then(|m| frame_ike(&m).map_err(|e| e.to_string()));
                match reply {
                    Ok(b) => self
                        .endpoint
                        .respond(now_ms, &from, &req, Code::Created, b, step::IKE3, out),
                    Err(e) => {
                        log::info!("{}: handshake with {from} failed: {e}", self.setup.name);
                        self.handshakes.remove(&from);
                        self.endpoint
                            .respond(now_ms, &from, &req, Code::BadRequest, vec![], step::ERROR, out);
                    }
                }
            }
            IkeState::AuthSent => {
                if let Err(e) = session.handle_auth(&msg) {
                    log::info!("{}: handshake with {from} failed: {e}", self.setup.name);
                    self.handshakes.remove(&from);
                    return self
                        .endpoint
                        .respond(now_ms, &from, &req, Code::BadRequest, vec![], step::ERROR, out);
                }
                let keys = session.child_keys().expect("established");
                let local = session.local_child_spi();
                let peer = session.peer_child_spi().expect("authenticated");
                let t = t.clone();
                let ipsec = t.ipsec.clone().expect("IKE tokens carry ipsec");
                let pair = SaKeyPair {
                    sa_c: keys.sa_c_key,
                    sa_rs: keys.sa_rs_key,
                };
                let (sa_c, sa_rs) = ipsec::templates(pair, local, peer, &ipsec);
                match self.install(&from, &t, sa_c, sa_rs, now) {
                    Ok(()) => self
                        .endpoint
                        .respond(now_ms, &from, &req, Code::Created, vec![], step::IKE_ACK, out),
                    Err(e) => {
                        let code = match e {
                            IpsecError::SpiCollision(_) => Code::Conflict,
                            _ => Code::BadRequest,
                        };
                        self.endpoint
                            .respond(now_ms, &from, &req, code, vec![], step::ERROR, out)
                    }
                }
            }
            _ => self
                .endpoint
                .respond(now_ms, &from, &req, Code::BadRequest, vec![], step::ERROR, out),
        }
    }

    fn on_protected(&mut self, now_ms: u64, from: String, req: Envelope, spi: u32, out: &mut Vec<Outbound>) {
        let now = self.endpoint.unix(now_ms);
        let Some(g) = self.grants.get(&spi).filter(|g| g.client == from) else {
            self.stats.denied += 1;
            return self
                .endpoint
                .respond(now_ms, &from, &req, Code::Unauthorized, vec![], step::F, out);
        };
        if g.token.exp <= now {
            self.stats.denied += 1;
            self.endpoint
                .respond(now_ms, &from, &req, Code::Unauthorized, b"token expired".to_vec(), step::F, out);
            return self.tear_down(now_ms, &from, out);
        }
        let token = g.token.clone();
        self.serve(now_ms, &from, &req, &token, out);
    }

    fn serve(&mut self, now_ms: u64, from: &str, req: &Envelope, t: &AccessToken, out: &mut Vec<Outbound>) {
        let Some(value) = self.setup.resources.get(&req.uri_path).cloned() else {
            return self
                .endpoint
                .respond(now_ms, from, req, Code::BadRequest, vec![], step::F, out);
        };
        if !t.scope_allows(req.code) {
            self.stats.denied += 1;
            return self
                .endpoint
                .respond(now_ms, from, req, Code::Unauthorized, vec![], step::F, out);
        }
        self.stats.resources_served += 1;
        self.endpoint
            .respond(now_ms, from, req, Code::Content, value, step::F, out);
    }

    fn on_request(&mut self, now_ms: u64, from: String, req: Envelope, spi: Option<u32>, out: &mut Vec<Outbound>) {
        match (spi, req.code, req.uri_path.as_str()) {
            (None, Code::Post, PATH_AUTHZ_INFO) if self.setup.introspection => {
                let to = self.setup.as_name.clone();
                let mid = self.endpoint.request(
                    now_ms,
                    &to,
                    Code::Post,
                    PATH_INTROSPECT,
                    req.payload.clone(),
                    step::D,
                    out,
                );
                self.parked.insert(mid, (from, req));
            }
            (None, Code::Post, PATH_AUTHZ_INFO) => self.on_authz_info(now_ms, from, req, out),
            (None, Code::Post, PATH_IKE) => self.on_ike(now_ms, from, req, out),
            (Some(spi), _, _) => self.on_protected(now_ms, from, req, spi, out),
            (None, _, _) => {
                let now = self.endpoint.unix(now_ms);
                let base = self.base_grants.get(&from).filter(|t| t.exp > now).cloned();
                match base {
                    Some(t) => self.serve(now_ms, &from, &req, &t, out),
                    None => {
                        let hint = self.setup.as_name.as_bytes().to_vec();
                        self.endpoint
                            .respond(now_ms, &from, &req, Code::Unauthorized, hint, step::PROBE_REPLY, out);
                    }
                }
            }
        }
    }

    fn on_introspection(&mut self, now_ms: u64, request: &Envelope, env: &Envelope, out: &mut Vec<Outbound>) {
        let Some((from, req)) = self.parked.remove(&request.message_id) else {
            return;
        };
        let active = env.code == Code::Content
            && IntrospectionResponse::decode(&env.payload).is_ok_and(|r| r.active);
        if active {
            self.on_authz_info(now_ms, from, req, out);
        } else {
            self.reject(now_ms, &from, &req, Code::Unauthorized, "token not active", out);
        }
    }
}

impl Node for ResourceServer {
    fn name(&self) -> &str {
        &self.setup.name
    }

    fn handle(&mut self, now_ms: u64, d: Datagram, out: &mut Vec<Outbound>) {
        match self.endpoint.receive(now_ms, d, out) {
            Some(Event::Request { from, env, spi }) => self.on_request(now_ms, from, env, spi, out),
            Some(Event::Response {
                env,
                request,
                step: step::D,
                ..
            }) => self.on_introspection(now_ms, &request, &env, out),
            _ => {}
        }
    }

    fn tick(&mut self, now_ms: u64, out: &mut Vec<Outbound>) {
        for e in self.endpoint.tick(now_ms, out) {
            if let Event::Timeout {
                request,
                step: step::D,
                ..
            } = e
            {
                if let Some((from, req)) = self.parked.remove(&request.message_id) {
                    self.reject(now_ms, &from, &req, Code::Unauthorized, "introspection failed", out);
                }
            }
        }
        let now = self.endpoint.unix(now_ms);
        for sa in self.endpoint.sa_db.purge_expired(now) {
            if sa.direction == Direction::Inbound && self.grants.remove(&sa.spi).is_some() {
                self.release(now_ms, sa.spi, out);
            }
        }
    }

    fn next_timer(&self) -> Option<u64> {
        self.endpoint.next_timer()
    }
}

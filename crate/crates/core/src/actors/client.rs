//! Client: discovers the AS, obtains a token, sets up the channel to the RS
//! and fetches one resource.

use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::{step, Endpoint, Event, Node, Outbound, PATH_AUTHZ_INFO, PATH_IKE, PATH_TOKEN};
use crate::codec::{frame_ike, parse_ike, Code, Envelope, IkeRole};
use crate::config::KeyForm;
use crate::crypto::{cert, SignKeyPair};
use crate::ike::{Credential, IkeConfig, IkeSession, IkeState};
use crate::ipsec::{self, Direction, SaTemplate, SecurityAssociation};
use crate::net::Datagram;
use crate::token::{CoseKeyClaim, IpsecStruct, KeyType, Method, RsInformation, TokenRequest, PSK_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Idle,
    Probing,
    AwaitingToken,
    AwaitingSpiUpdate,
    PostingToken,
    Handshake,
    ChannelReady,
    AwaitingResource,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientOutcome {
    Resource(Vec<u8>),
    Failed { step: String, reason: String },
}

/// What the Client does with RS Information.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextAction {
    PostToken,
    /// `spi_sa_rs` is taken locally; ask the AS for this value instead.
    RequestNewSpi(u32),
}

/// Client identity and credentials.
#[derive(Debug, Clone)]
pub struct ClientSetup {
    pub name: String,
    pub as_name: String,
    pub rs_name: String,
    pub resource: String,
    pub scope: String,
    pub method: Code,
    pub knows_as: bool,
    pub collision_retries: u32,
    pub sign_key: SignKeyPair,
    /// Certificate chain for `sign_key`, leaf first.
    pub certificate_chain: Vec<Vec<u8>>,
    pub key_form: KeyForm,
    /// Send the EC key as `req_cnf`, asking for asymmetric proof of
    /// possession.
    pub offer_ec_key: bool,
    /// Root key that RS certificate chains must reach.
    pub trust_anchor: Vec<u8>,
    pub sa_window: u32,
}

#[derive(Debug)]
pub struct Client {
    setup: ClientSetup,
    pub endpoint: Endpoint,
    rng: ChaCha20Rng,
    phase: ClientPhase,
    as_name: Option<String>,
    rs_info: Option<RsInformation>,
    ike: Option<IkeSession>,
    installed: Vec<(Direction, u32)>,
    /// SPIs the Client treats as taken in addition to its SA database.
    reserved_spis: BTreeSet<u32>,
    psk: Option<(Vec<u8>, [u8; PSK_LEN])>,
    ec_registered: bool,
    retries_left: u32,
    outcome: Option<ClientOutcome>,
    /// Size of the sealed token sent in step C.
    pub last_token_len: Option<usize>,
}

impl Client {
    pub fn new(setup: ClientSetup, endpoint: Endpoint, seed: [u8; 32]) -> Self {
        Client {
            retries_left: setup.collision_retries,
            setup,
            endpoint,
            rng: ChaCha20Rng::from_seed(seed),
            phase: ClientPhase::Idle,
            as_name: None,
            rs_info: None,
            ike: None,
            installed: Vec::new(),
            reserved_spis: BTreeSet::new(),
            psk: None,
            ec_registered: false,
            outcome: None,
            last_token_len: None,
        }
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn outcome(&self) -> Option<&ClientOutcome> {
        self.outcome.as_ref()
    }

    pub fn rs_info(&self) -> Option<&RsInformation> {
        self.rs_info.as_ref()
    }

    pub fn ike_session(&self) -> Option<&IkeSession> {
        self.ike.as_ref()
    }

    /// Treats `spi` as already used by a local inbound SA.
    pub fn mark_spi_in_use(&mut self, spi: u32) {
        self.reserved_spis.insert(spi);
    }

    fn spi_taken(&self, spi: u32) -> bool {
        self.reserved_spis.contains(&spi) || self.endpoint.sa_db.inbound_spi_in_use(spi)
    }

    fn fresh_spi(&mut self, avoid: Option<u32>) -> u32 {
        loop {
            let v = self.rng.next_u32();
            if v != 0 && Some(v) != avoid && !self.spi_taken(v) {
                return v;
            }
        }
    }

    fn kid(&self) -> Vec<u8> {
        Sha256::digest(self.setup.sign_key.public())[..8].to_vec()
    }

    /// Begins a new contact with the RS. Earlier keys and registrations at
    /// the AS are kept.
    pub fn start(&mut self, now_ms: u64, out: &mut Vec<Outbound>) {
        self.outcome = None;
        self.rs_info = None;
        self.ike = None;
        self.last_token_len = None;
        self.retries_left = self.setup.collision_retries;
        if self.setup.knows_as || self.as_name.is_some() {
            self.as_name.get_or_insert_with(|| self.setup.as_name.clone());
            self.request_token(now_ms, None, out);
        } else {
            self.phase = ClientPhase::Probing;
            let (rs, path) = (self.setup.rs_name.clone(), self.setup.resource.clone());
            self.endpoint
                .request(now_ms, &rs, Code::Get, &path, vec![], step::PROBE, out);
        }
    }

    /// Tears down the channel to the RS so that the next `start` is a new
    /// contact.
    pub fn restart(&mut self) {
        self.remove_sas();
        let rs = self.setup.rs_name.clone();
        self.endpoint.cancel_requests_to(&rs);
        self.phase = ClientPhase::Idle;
    }

    fn token_request(&self, spi_sa_rs: Option<u32>) -> TokenRequest {
        let req_cnf = if self.setup.offer_ec_key {
            Some(if self.ec_registered {
                CoseKeyClaim::reference(KeyType::Ec, self.kid())
            } else {
                match (self.setup.certificate_chain.is_empty(), self.setup.key_form) {
                    (false, KeyForm::Certificate) => {
                        CoseKeyClaim::ec_certificate(self.kid(), self.setup.certificate_chain.clone())
                            .expect("own certificate parses")
                    }
                    _ => CoseKeyClaim::ec_raw(self.kid(), self.setup.sign_key.public().to_vec()),
                }
            })
        } else {
            self.psk
                .as_ref()
                .map(|(kid, _)| CoseKeyClaim::reference(KeyType::Symmetric, kid.clone()))
        };
        TokenRequest {
            client_id: self.setup.name.clone(),
            audience: self.setup.rs_name.clone(),
            scope: self.setup.scope.clone(),
            req_cnf,
            spi_sa_rs,
        }
    }

    fn request_token(&mut self, now_ms: u64, spi_sa_rs: Option<u32>, out: &mut Vec<Outbound>) {
        let req = self.token_request(spi_sa_rs);
        self.phase = if spi_sa_rs.is_some() {
            ClientPhase::AwaitingSpiUpdate
        } else {
            ClientPhase::AwaitingToken
        };
        let as_name = self.as_name.clone().expect("AS known before token request");
        match req.encode() {
            Ok(p) => {
                self.endpoint
                    .request(now_ms, &as_name, Code::Post, PATH_TOKEN, p, step::A, out);
            }
            Err(e) => self.fail(step::A, e.to_string()),
        }
    }

    /// Checks RS Information and decides whether the token can be posted.
    pub fn client_handle_rs_info(&mut self, info: &RsInformation, now: u64) -> Result<NextAction, String> {
        if info.profile != crate::token::PROFILE_IPSEC {
            return Ok(NextAction::PostToken);
        }
        let method = info.method().map_err(|e| e.to_string())?;
        match method {
            Method::Dp => {
                let ipsec = info.ipsec.as_ref().expect("method checked");
                ipsec.validate().map_err(|e| e.to_string())?;
                let spi_rs = ipsec.spi_sa_rs.expect("DP carries SPIs");
                if self.spi_taken(spi_rs) {
                    let spi_c = ipsec.spi_sa_c;
                    return Ok(NextAction::RequestNewSpi(self.fresh_spi(spi_c)));
                }
            }
            Method::IkePsk => {
                let k = info.cnf.as_ref().expect("method checked");
                let key: [u8; PSK_LEN] = k
                    .key_bytes
                    .as_deref()
                    .and_then(|b| b.try_into().ok())
                    .ok_or("PSK missing from RS Information")?;
                self.psk = Some((k.kid.clone(), key));
            }
            Method::IkeAsym => {
                let k = info.cnf.as_ref().expect("method checked");
                if !k.chain.is_empty() {
                    cert::verify_chain(&k.chain, &self.setup.trust_anchor, Some(&self.setup.rs_name), now)
                        .map_err(|e| format!("RS certificate: {e}"))?;
                } else if k.key_bytes.is_none() {
                    return Err("RS key missing from RS Information".into());
                }
                self.ec_registered = true;
            }
        }
        Ok(NextAction::PostToken)
    }

    fn install(&mut self, inbound: SaTemplate, outbound: SaTemplate, lifetime_s: u64, now: u64) -> Result<(), String> {
        let rs = self.setup.rs_name.clone();
        let exp = now + lifetime_s;
        let (i, o) = (inbound.spi, outbound.spi);
        self.endpoint
            .sa_db
            .install_pair(
                SecurityAssociation::new(inbound, Direction::Inbound, &*rs, exp, self.setup.sa_window),
                SecurityAssociation::new(outbound, Direction::Outbound, &*rs, exp, self.setup.sa_window),
                now,
            )
            .map_err(|e| e.to_string())?;
        self.installed.push((Direction::Inbound, i));
        self.installed.push((Direction::Outbound, o));
        Ok(())
    }

    fn remove_sas(&mut self) {
        for (d, spi) in self.installed.drain(..) {
            self.endpoint.sa_db.remove(d, spi);
        }
    }

    fn post_token(&mut self, now_ms: u64, out: &mut Vec<Outbound>) {
        let info = self.rs_info.clone().expect("RS Information stored");
        if let Ok(Method::Dp) = info.method() {
            let ipsec = info.ipsec.as_ref().expect("DP has ipsec");
            let (sa_c, sa_rs) = match ipsec::derive_dp_sas(ipsec) {
                Ok(p) => p,
                Err(e) => return self.fail(step::C, e.to_string()),
            };
            let now = self.endpoint.unix(now_ms);
            if let Err(e) = self.install(sa_rs, sa_c, ipsec.lifetime_s, now) {
                return self.fail(step::C, e);
            }
        }
        self.phase = ClientPhase::PostingToken;
        self.last_token_len = Some(info.token_bytes.len());
        let rs = self.setup.rs_name.clone();
        self.endpoint
            .request(now_ms, &rs, Code::Post, PATH_AUTHZ_INFO, info.token_bytes, step::C, out);
    }

    fn fail(&mut self, step: &str, reason: impl Into<String>) {
        let reason = reason.into();
        log::info!("{}: failed at {step}: {reason}", self.setup.name);
        self.remove_sas();
        if let Some(s) = &mut self.ike {
            if s.state() != IkeState::Established {
                s.fail();
            }
        }
        self.phase = ClientPhase::Failed;
        self.outcome = Some(ClientOutcome::Failed {
            step: step.to_owned(),
            reason,
        });
    }

    fn request_resource(&mut self, now_ms: u64, out: &mut Vec<Outbound>) {
        self.phase = ClientPhase::AwaitingResource;
        let (rs, path) = (self.setup.rs_name.clone(), self.setup.resource.clone());
        self.endpoint
            .request(now_ms, &rs, self.setup.method, &path, vec![], step::F_REQ, out);
    }

    fn on_token_response(&mut self, now_ms: u64, env: &Envelope, out: &mut Vec<Outbound>) {
        if env.code != Code::Created {
            return self.fail(step::B, format!("token request refused with {:?}", env.code));
        }
        let info = match RsInformation::decode(&env.payload) {
            Ok(i) => i,
            Err(e) => return self.fail(step::B, e.to_string()),
        };
        let now = self.endpoint.unix(now_ms);
        match self.client_handle_rs_info(&info, now) {
            Ok(NextAction::PostToken) => {
                self.rs_info = Some(info);
                self.post_token(now_ms, out);
            }
            Ok(NextAction::RequestNewSpi(spi)) => {
                if self.phase == ClientPhase::AwaitingSpiUpdate {
                    return self.fail(step::B, "updated spi_sa_rs still collides");
                }
                self.rs_info = Some(info);
                self.request_token(now_ms, Some(spi), out);
            }
            Err(e) => self.fail(step::B, e),
        }
    }

    fn on_authz_info_response(&mut self, now_ms: u64, env: &Envelope, spi: Option<u32>, out: &mut Vec<Outbound>) {
        let method = self.rs_info.as_ref().map(|i| i.method());
        match (env.code, method) {
            (Code::Created, Some(Ok(Method::Dp))) if spi.is_some() => {
                self.phase = ClientPhase::ChannelReady;
                self.request_resource(now_ms, out);
            }
            (Code::Created, Some(Ok(m @ (Method::IkePsk | Method::IkeAsym)))) => {
                self.start_ike(now_ms, m, &env.payload, out)
            }
            (Code::Created, Some(Err(_))) => {
                self.phase = ClientPhase::ChannelReady;
                self.request_resource(now_ms, out);
            }
            (Code::Conflict, _) => {
                self.remove_sas();
                if self.retries_left > 0 {
                    self.retries_left -= 1;
                    self.rs_info = None;
                    self.request_token(now_ms, None, out);
                } else {
                    self.fail(step::C, "SPI collision at the RS");
                }
            }
            (code, _) => self.fail(step::C, format!("token rejected with {code:?}")),
        }
    }

    fn ike_config(&mut self, m: Method) -> Result<IkeConfig, String> {
        let child_spi = self.fresh_spi(None);
        let info = self.rs_info.as_ref().expect("stored");
        let credential = match m {
            Method::IkePsk => Credential::Psk(self.psk.as_ref().ok_or("no PSK")?.1.to_vec()),
            _ => Credential::Signature {
                own: self.setup.sign_key.clone(),
                peer_public: info
                    .cnf
                    .as_ref()
                    .and_then(|k| k.key_bytes.clone())
                    .ok_or("no RS key")?,
            },
        };
        Ok(IkeConfig {
            role: IkeRole::Responder,
            credential,
            pop_key: info.cnf.clone(),
            own_id: self.setup.name.as_bytes().to_vec(),
            peer_id: self.setup.rs_name.as_bytes().to_vec(),
            child_spi,
            ts_i: self.setup.rs_name.as_bytes().to_vec(),
            ts_r: self.setup.name.as_bytes().to_vec(),
        })
    }

    fn start_ike(&mut self, now_ms: u64, m: Method, payload: &[u8], out: &mut Vec<Outbound>) {
        let cfg = match self.ike_config(m) {
            Ok(c) => c,
            Err(e) => return self.fail(step::IKE1, e),
        };
        let mut session = IkeSession::new(cfg);
        let reply = parse_ike(payload)
            .map_err(|e| e.to_string())
            .and_then(|msg| session.respond_sa_init(&msg, &mut self.rng).map_err(|e| e.to_string()))
            .and_then(|r| frame_ike(&r).map_err(|e| e.to_string()));
        self.ike = Some(session);
        match reply {
            Ok(bytes) => {
                self.phase = ClientPhase::Handshake;
                let rs = self.setup.rs_name.clone();
                self.endpoint
                    .request(now_ms, &rs, Code::Post, PATH_IKE, bytes, step::IKE2, out);
            }
            Err(e) => self.fail(step::IKE1, e),
        }
    }

    fn on_ike_response(&mut self, now_ms: u64, env: &Envelope, spi: Option<u32>, step_label: &str, out: &mut Vec<Outbound>) {
        if env.code != Code::Created {
            return self.fail(step_label, format!("handshake rejected with {:?}", env.code));
        }
        if step_label == step::IKE4 {
            if spi.is_none() {
                return self.fail(step::IKE_ACK, "handshake ack not protected");
            }
            self.phase = ClientPhase::ChannelReady;
            return self.request_resource(now_ms, out);
        }
        let session = self.ike.as_mut().expect("session started");
        let reply = parse_ike(&env.payload)
            .map_err(|e| e.to_string())
            .and_then(|msg| session.respond_auth(&msg, &mut self.rng).map_err(|e| e.to_string()))
            .and_then(|r| frame_ike(&r).map_err(|e| e.to_string()));
        let bytes = match reply {
            Ok(b) => b,
            Err(e) => return self.fail(step::IKE3, e),
        };
        let keys = session.child_keys().expect("established");
        let (local, peer) = (session.local_child_spi(), session.peer_child_spi().expect("authenticated"));
        let ipsec: IpsecStruct = self
            .rs_info
            .as_ref()
            .and_then(|i| i.ipsec.clone())
            .expect("IKE methods carry ipsec");
        let keys = crate::crypto::SaKeyPair {
            sa_c: keys.sa_c_key,
            sa_rs: keys.sa_rs_key,
        };
        let (sa_c, sa_rs) = ipsec::templates(keys, peer, local, &ipsec);
        let now = self.endpoint.unix(now_ms);
        if let Err(e) = self.install(sa_rs, sa_c, ipsec.lifetime_s, now) {
            return self.fail(step::IKE3, e);
        }
        let rs = self.setup.rs_name.clone();
        self.endpoint
            .request(now_ms, &rs, Code::Post, PATH_IKE, bytes, step::IKE4, out);
    }

    fn on_response(&mut self, now_ms: u64, from: &str, env: Envelope, spi: Option<u32>, step_label: &'static str, out: &mut Vec<Outbound>) {
        if matches!(self.phase, ClientPhase::Done | ClientPhase::Failed | ClientPhase::Idle) {
            return;
        }
        match step_label {
            step::PROBE => {
                if env.code != Code::Unauthorized || env.payload.is_empty() {
                    return self.fail(step::PROBE_REPLY, "RS gave no AS hint");
                }
                match String::from_utf8(env.payload.clone()) {
                    Ok(hint) => {
                        self.as_name = Some(hint);
                        self.request_token(now_ms, None, out);
                    }
                    Err(_) => self.fail(step::PROBE_REPLY, "AS hint is not text"),
                }
            }
            step::A if Some(from) == self.as_name.as_deref() => self.on_token_response(now_ms, &env, out),
            step::C => self.on_authz_info_response(now_ms, &env, spi, out),
            step::IKE2 | step::IKE4 => self.on_ike_response(now_ms, &env, spi, step_label, out),
            step::F_REQ => {
                let protected = self.rs_info.as_ref().is_some_and(|i| i.ipsec.is_some());
                if protected && spi.is_none() {
                    return self.fail(step::F, "resource response not protected");
                }
                if env.code == Code::Content {
                    self.phase = ClientPhase::Done;
                    self.outcome = Some(ClientOutcome::Resource(env.payload));
                } else {
                    self.fail(step::F, format!("resource request refused with {:?}", env.code));
                }
            }
            _ => {}
        }
    }
}

impl Node for Client {
    fn name(&self) -> &str {
        &self.setup.name
    }

    fn handle(&mut self, now_ms: u64, d: Datagram, out: &mut Vec<Outbound>) {
        match self.endpoint.receive(now_ms, d, out) {
            Some(Event::Response {
                from, env, spi, step, ..
            }) => self.on_response(now_ms, &from, env, spi, step, out),
            Some(Event::Request { from, env, .. }) => {
                self.endpoint
                    .respond(now_ms, &from, &env, Code::BadRequest, vec![], step::ERROR, out);
            }
            _ => {}
        }
    }

    fn tick(&mut self, now_ms: u64, out: &mut Vec<Outbound>) {
        for e in self.endpoint.tick(now_ms, out) {
            if let Event::Timeout { step, .. } = e {
                if !matches!(self.phase, ClientPhase::Done | ClientPhase::Failed) {
                    self.fail(step, "no response after retransmissions");
                }
            }
        }
        let now = self.endpoint.unix(now_ms);
        for sa in self.endpoint.sa_db.purge_expired(now) {
            self.installed.retain(|&(d, s)| !(d == sa.direction && s == sa.spi));
        }
    }

    fn next_timer(&self) -> Option<u64> {
        self.endpoint.next_timer()
    }
}

//! The three ACE endpoints and the request/response layer they share.
//!
//! Each actor owns an [`Endpoint`] that applies the SPD, runs ESP, assigns
//! message ids, retransmits unanswered requests and answers duplicate
//! requests from a response cache.

pub mod authz;
pub mod client;
pub mod resource;

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::codec::{frame_envelope, parse_envelope, Code, Envelope};
use crate::config::RetransmitConfig;
use crate::ipsec::{self, Direction, EspPacket, SaDatabase, SpdDecision, Traffic};
use crate::net::{Datagram, Protocol, SendMeta};

pub use authz::{AuthorizationServer, RestoreOutcome, SpiPool};
pub use client::{Client, ClientOutcome, ClientPhase, NextAction};
pub use resource::ResourceServer;

pub const PATH_TOKEN: &str = "/token";
pub const PATH_INTROSPECT: &str = "/introspect";
pub const PATH_AUTHZ_INFO: &str = "/authz-info";
pub const PATH_IKE: &str = "/ike";
pub const PATH_RELEASE_SPI: &str = "/release-spi";

/// Trace labels. Letters follow the ACE protocol steps.
pub mod step {
    pub const PROBE: &str = "probe";
    pub const PROBE_REPLY: &str = "probe-reply";
    pub const A: &str = "A";
    pub const B: &str = "B";
    pub const C: &str = "C";
    pub const C_ACK: &str = "C-ack";
    pub const D: &str = "D";
    pub const E: &str = "E";
    pub const IKE1: &str = "IKE1";
    pub const IKE2: &str = "IKE2";
    pub const IKE3: &str = "IKE3";
    pub const IKE4: &str = "IKE4";
    pub const IKE_ACK: &str = "IKE-ack";
    pub const F_REQ: &str = "F-req";
    pub const F: &str = "F";
    pub const RELEASE: &str = "release";
    pub const RELEASE_ACK: &str = "release-ack";
    pub const ERROR: &str = "error";
}

/// A datagram ready for the transport plus its trace metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub datagram: Datagram,
    pub meta: SendMeta,
}

/// Something an actor reacts to.
pub trait Node {
    fn name(&self) -> &str;
    fn handle(&mut self, now_ms: u64, d: Datagram, out: &mut Vec<Outbound>);
    fn tick(&mut self, now_ms: u64, out: &mut Vec<Outbound>);
    fn next_timer(&self) -> Option<u64>;
}

#[derive(Debug, Clone)]
struct Pending {
    env: Envelope,
    step: &'static str,
    retransmits: u32,
    timeout_ms: u64,
    next_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EndpointStats {
    pub retransmissions: u64,
    pub discarded: u64,
    pub replays: u64,
    pub esp_auth_failures: u64,
    pub duplicates: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Request {
        from: String,
        env: Envelope,
        /// Inbound SPI when the request arrived over ESP.
        spi: Option<u32>,
    },
    Response {
        from: String,
        env: Envelope,
        spi: Option<u32>,
        request: Envelope,
        step: &'static str,
    },
    Timeout {
        to: String,
        request: Envelope,
        step: &'static str,
    },
}

#[derive(Debug)]
pub struct Endpoint {
    pub name: String,
    pub sa_db: SaDatabase,
    base_unix: u64,
    next_mid: u16,
    retx: RetransmitConfig,
    pending: BTreeMap<(String, u16), Pending>,
    answered: HashMap<(String, u16), (Envelope, &'static str)>,
    in_progress: HashSet<(String, u16)>,
    pub stats: EndpointStats,
}

impl Endpoint {
    pub fn new(name: impl Into<String>, sa_db: SaDatabase, base_unix: u64, retx: RetransmitConfig) -> Self {
        Endpoint {
            name: name.into(),
            sa_db,
            base_unix,
            next_mid: 1,
            retx,
            pending: BTreeMap::new(),
            answered: HashMap::new(),
            in_progress: HashSet::new(),
            stats: EndpointStats::default(),
        }
    }

    pub fn unix(&self, now_ms: u64) -> u64 {
        self.base_unix + now_ms / 1000
    }

    /// Sends a new request and arms its retransmission timer.
    pub fn request(
        &mut self,
        now_ms: u64,
        to: &str,
        code: Code,
        path: &str,
        payload: Vec<u8>,
        step: &'static str,
        out: &mut Vec<Outbound>,
    ) -> u16 {
        let mid = self.next_mid;
        self.next_mid = self.next_mid.wrapping_add(1).max(1);
        let env = Envelope::request(code, path, mid, payload);
        self.emit(now_ms, to, &env, step, false, out);
        self.pending.insert(
            (to.to_owned(), mid),
            Pending {
                env,
                step,
                retransmits: 0,
                timeout_ms: self.retx.initial_ms,
                next_at: now_ms + self.retx.initial_ms,
            },
        );
        mid
    }

    /// Answers `req` from `to` and caches the answer for duplicates.
    pub fn respond(
        &mut self,
        now_ms: u64,
        to: &str,
        req: &Envelope,
        code: Code,
        payload: Vec<u8>,
        step: &'static str,
        out: &mut Vec<Outbound>,
    ) {
        let env = Envelope::response_to(req, code, payload);
        let key = (to.to_owned(), req.message_id);
        self.in_progress.remove(&key);
        self.emit(now_ms, to, &env, step, false, out);
        self.answered.insert(key, (env, step));
    }

    /// Drops the retransmission state of every request to `peer`.
    pub fn cancel_requests_to(&mut self, peer: &str) {
        let keys: Vec<_> = self.pending.keys().filter(|(p, _)| p == peer).cloned().collect();
        for k in keys {
            self.pending.remove(&k);
            self.sa_db.forget_bypassed_request(&k.0, k.1);
        }
    }

    fn emit(
        &mut self,
        now_ms: u64,
        to: &str,
        env: &Envelope,
        step: &'static str,
        retransmission: bool,
        out: &mut Vec<Outbound>,
    ) {
        let framed = match frame_envelope(env) {
            Ok(f) => f,
            Err(e) => {
                log::error!("{}: cannot frame {step}: {e}", self.name);
                return;
            }
        };
        let now = self.unix(now_ms);
        let decision =
            ipsec::spd_filter(&self.sa_db, to, Traffic::Plain(env), Direction::Outbound, now);
        let (protocol, bytes) = match decision {
            SpdDecision::Bypass => {
                if env.is_request() {
                    self.sa_db.note_bypassed_request(to, env.message_id);
                }
                (Protocol::Plain, framed.clone())
            }
            SpdDecision::Protect(spi) => {
                match ipsec::esp_encap_db(&mut self.sa_db, spi, &framed, now) {
                    Ok(p) => (Protocol::Esp, p.to_bytes()),
                    Err(e) => {
                        log::warn!("{}: ESP encapsulation failed for {step}: {e}", self.name);
                        return;
                    }
                }
            }
            SpdDecision::Discard => return,
        };
        out.push(Outbound {
            datagram: Datagram {
                from: self.name.clone(),
                to: to.to_owned(),
                protocol,
                bytes,
            },
            meta: SendMeta {
                step: step.to_owned(),
                coap_bytes: framed.len(),
                retransmission,
            },
        });
    }

    /// Runs the inbound policy and ESP, then request dedup and response
    /// matching. Returns `None` for anything the actor should not see.
    pub fn receive(&mut self, now_ms: u64, d: Datagram, out: &mut Vec<Outbound>) -> Option<Event> {
        let now = self.unix(now_ms);
        let (env, spi) = match d.protocol {
            Protocol::Plain => {
                let traffic_env = parse_envelope(&d.bytes).ok();
                let traffic = traffic_env.as_ref().map_or(Traffic::Garbage, Traffic::Plain);
                match ipsec::spd_filter(&self.sa_db, &d.from, traffic, Direction::Inbound, now) {
                    SpdDecision::Bypass => (traffic_env.expect("garbage never bypasses"), None),
                    _ => {
                        self.stats.discarded += 1;
                        return None;
                    }
                }
            }
            Protocol::Esp => {
                let pkt = EspPacket::from_bytes(&d.bytes).ok();
                let traffic = pkt.as_ref().map_or(Traffic::Garbage, Traffic::Esp);
                let SpdDecision::Protect(spi) =
                    ipsec::spd_filter(&self.sa_db, &d.from, traffic, Direction::Inbound, now)
                else {
                    self.stats.discarded += 1;
                    return None;
                };
                let pkt = pkt.expect("protect implies a parsed packet");
                let (pt, peer) = match ipsec::esp_decap(&mut self.sa_db, &pkt, now) {
                    Ok(x) => x,
                    Err(ipsec::IpsecError::Replay(_)) => {
                        self.stats.replays += 1;
                        return None;
                    }
                    Err(_) => {
                        self.stats.esp_auth_failures += 1;
                        return None;
                    }
                };
                if peer != d.from {
                    self.stats.discarded += 1;
                    return None;
                }
                match parse_envelope(&pt) {
                    Ok(e) => (e, Some(spi)),
                    Err(_) => {
                        self.stats.discarded += 1;
                        return None;
                    }
                }
            }
        };

        let key = (d.from.clone(), env.message_id);
        if env.is_request() {
            if let Some((cached, step)) = self.answered.get(&key).cloned() {
                self.stats.duplicates += 1;
                self.emit(now_ms, &d.from, &cached, step, true, out);
                return None;
            }
            if !self.in_progress.insert(key) {
                self.stats.duplicates += 1;
                return None;
            }
            Some(Event::Request {
                from: d.from,
                env,
                spi,
            })
        } else {
            let Some(p) = self.pending.remove(&key) else {
                self.stats.duplicates += 1;
                return None;
            };
            self.sa_db.forget_bypassed_request(&d.from, env.message_id);
            Some(Event::Response {
                from: d.from,
                env,
                spi,
                request: p.env,
                step: p.step,
            })
        }
    }

    /// Retransmits due requests; requests out of attempts become timeouts.
    pub fn tick(&mut self, now_ms: u64, out: &mut Vec<Outbound>) -> Vec<Event> {
        let due: Vec<(String, u16)> = self
            .pending
            .iter()
            .filter(|(_, p)| p.next_at <= now_ms)
            .map(|(k, _)| k.clone())
            .collect();
        let mut events = Vec::new();
        for key in due {
            let p = self.pending.get_mut(&key).expect("listed above");
            if p.retransmits < self.retx.max_retransmits {
                p.retransmits += 1;
                p.timeout_ms *= 2;
                p.next_at = now_ms + p.timeout_ms;
                let (env, step) = (p.env.clone(), p.step);
                self.stats.retransmissions += 1;
                self.emit(now_ms, &key.0, &env, step, true, out);
            } else {
                let p = self.pending.remove(&key).expect("listed above");
                self.sa_db.forget_bypassed_request(&key.0, key.1);
                events.push(Event::Timeout {
                    to: key.0,
                    request: p.env,
                    step: p.step,
                });
            }
        }
        events
    }

    pub fn next_timer(&self) -> Option<u64> {
        self.pending.values().map(|p| p.next_at).min()
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }
}

/// Seeds an actor RNG from the run seed, the run index and the actor name.
pub fn actor_seed(seed: u64, run: u32, actor: &str) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(run.to_be_bytes());
    h.update(actor.as_bytes());
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::AeadKey;
    use crate::ipsec::{SaTemplate, SecurityAssociation};
    use crate::token::{IpsecMode, SecurityProtocol};

    fn endpoints() -> (Endpoint, Endpoint) {
        let retx = RetransmitConfig::default();
        (
            Endpoint::new("a", SaDatabase::default(), 0, retx.clone()),
            Endpoint::new("b", SaDatabase::default(), 0, retx),
        )
    }

    fn deliver(to: &mut Endpoint, out: &mut Vec<Outbound>, now: u64) -> Vec<Event> {
        let mut replies = Vec::new();
        let evs = out
            .drain(..)
            .filter_map(|o| to.receive(now, o.datagram, &mut replies))
            .collect();
        *out = replies;
        evs
    }

    #[test]
    fn retransmits_then_times_out() {
        let (mut a, _) = endpoints();
        let mut out = Vec::new();
        a.request(0, "b", Code::Get, "/x", vec![], step::A, &mut out);
        assert_eq!(a.next_timer(), Some(500));
        let mut t = 0;
        let mut retx = 0;
        let mut timeout = None;
        while let Some(next) = a.next_timer() {
            t = next;
            out.clear();
            for e in a.tick(t, &mut out) {
                timeout = Some(e);
            }
            retx += out.iter().filter(|o| o.meta.retransmission).count();
        }
        assert_eq!(retx, 4);
        // 500 + 1000 + 2000 + 4000 + 8000
        assert_eq!(t, 15_500);
        assert!(matches!(timeout, Some(Event::Timeout { step: "A", .. })));
    }

    #[test]
    fn duplicate_request_gets_cached_answer() {
        let (mut a, mut b) = endpoints();
        let mut out = Vec::new();
        a.request(0, "b", Code::Get, "/x", vec![], step::A, &mut out);
        let copy = out.clone();
        let evs = deliver(&mut b, &mut out, 0);
        let Event::Request { env, .. } = &evs[0] else { panic!() };
        b.respond(0, "a", env, Code::Content, b"v".to_vec(), step::B, &mut out);
        let mut again = copy;
        assert!(deliver(&mut b, &mut again, 1).is_empty());
        assert_eq!(again.len(), 1);
        assert!(again[0].meta.retransmission);
        let evs = deliver(&mut a, &mut out, 2);
        assert!(matches!(&evs[0], Event::Response { step: "A", .. }));
        // the duplicate answer is swallowed
        assert!(deliver(&mut a, &mut again, 3).is_empty());
        assert!(!a.has_pending());
    }

    #[test]
    fn protected_exchange() {
        let (mut a, mut b) = endpoints();
        let t = |spi| SaTemplate {
            spi,
            key: AeadKey::new([spi as u8; 16], [1; 4]),
            protocol: SecurityProtocol::Esp,
            mode: IpsecMode::Transport,
        };
        a.sa_db
            .install(SecurityAssociation::new(t(5), Direction::Outbound, "b", 100, 64), 0)
            .unwrap();
        b.sa_db
            .install(SecurityAssociation::new(t(5), Direction::Inbound, "a", 100, 64), 0)
            .unwrap();
        let mut out = Vec::new();
        a.request(0, "b", Code::Get, "/resource", vec![], step::F_REQ, &mut out);
        assert_eq!(out[0].datagram.protocol, Protocol::Esp);
        assert_eq!(out[0].meta.coap_bytes, 6 + 1 + 9);
        let replay = out.clone();
        let evs = deliver(&mut b, &mut out, 0);
        assert!(matches!(&evs[0], Event::Request { spi: Some(5), .. }));
        let mut replay = replay;
        assert!(deliver(&mut b, &mut replay, 0).is_empty());
        assert_eq!(b.stats.replays, 1);
    }
}

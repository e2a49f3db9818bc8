#![allow(dead_code)]

use ace_ipsec::actors::{ClientOutcome, Node, Outbound};
use ace_ipsec::codec::{parse_envelope, Code, Envelope};
use ace_ipsec::config::Config;
use ace_ipsec::net::{Datagram, Protocol, TraceRecord};
use ace_ipsec::scenario::{Backend, ScenarioName, World};

pub fn world(cfg: &Config, s: ScenarioName, seed: u64) -> World {
    World::new(cfg, s, seed, 0, Backend::Sim).expect("world builds")
}

/// Steps `w` until `pred` holds. False if the run ended first.
pub fn run_until(w: &mut World, pred: impl Fn(&World) -> bool) -> bool {
    if w.client.phase() == ace_ipsec::actors::ClientPhase::Idle {
        w.start().unwrap();
    }
    loop {
        w.step().unwrap();
        if pred(w) {
            return true;
        }
        if w.client.outcome().is_some() {
            return false;
        }
        match w.next_event() {
            Some(t) if t <= w.cfg.time.max_run_ms => w.advance_to(t),
            _ => return false,
        }
    }
}

pub fn succeeded(w: &World) -> bool {
    matches!(w.client.outcome(), Some(ClientOutcome::Resource(_)))
}

/// Delivered, first-transmission records of one step.
pub fn sends<'a>(trace: &'a [TraceRecord], step: &str) -> Vec<&'a TraceRecord> {
    trace
        .iter()
        .filter(|r| r.step_label == step && !r.retransmission)
        .collect()
}

/// Envelope of a record sent in the clear.
pub fn plain_envelope(r: &TraceRecord) -> Option<Envelope> {
    (r.protocol == Protocol::Plain).then(|| parse_envelope(&r.bytes).ok()).flatten()
}

/// Hands a datagram to a node and returns what it sent back, running its
/// timers once.
pub fn poke(node: &mut dyn Node, now_ms: u64, d: Datagram) -> Vec<Outbound> {
    let mut out = Vec::new();
    node.handle(now_ms, d, &mut out);
    node.tick(now_ms, &mut out);
    out
}

pub fn plain(from: &str, to: &str, env: &Envelope) -> Datagram {
    Datagram {
        from: from.into(),
        to: to.into(),
        protocol: Protocol::Plain,
        bytes: ace_ipsec::codec::frame_envelope(env).unwrap(),
    }
}

pub fn is_content(o: &Outbound) -> bool {
    o.datagram.protocol == Protocol::Plain
        && parse_envelope(&o.datagram.bytes).is_ok_and(|e| e.code == Code::Content)
}

pub mod attack {
    use super::*;
    use ace_ipsec::actors::PATH_AUTHZ_INFO;
    use ace_ipsec::crypto::AeadKey;
    use ace_ipsec::ipsec::EspPacket;
    use ace_ipsec::token::{seal_token, AccessToken};
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// What an attacker can put on the wire towards the RS.
    #[derive(Debug, Clone)]
    pub enum Move {
        Get { from: u8, path: u8, mid: u16 },
        Garbage { from: u8, bytes: Vec<u8> },
        ForgedToken { from: u8, mid: u16 },
        CapturedToken { from: u8, mid: u16, flip: Option<u16> },
        Ike { from: u8, mid: u16, bytes: Vec<u8> },
        Esp { from: u8, spi: u8, seq: u32, bytes: Vec<u8> },
        Wait { ms: u16 },
    }

    pub struct Arena {
        pub w: World,
        pub captured: Vec<u8>,
        pub claims: AccessToken,
        senders: Vec<String>,
        now_ms: u64,
        rng: ChaCha20Rng,
    }

    impl Arena {
        /// A fresh world whose RS has never seen a token, plus a token
        /// captured from an identical world where the Client succeeded.
        pub fn new(s: ScenarioName, seed: u64) -> Arena {
            let cfg = Config::default();
            let mut done = world(&cfg, s, seed);
            assert!(done.run().unwrap().success);
            let captured = done.client.rs_info().unwrap().token_bytes.clone();
            let now = done.rs.endpoint.unix(0);
            let claims = done.rs.read_token(&captured, now).unwrap();
            let w = world(&cfg, s, seed);
            let senders = vec![cfg.client.name.clone(), "mallory".into(), cfg.authorization_server.name.clone()];
            Arena { w, captured, claims, senders, now_ms: 0, rng: ChaCha20Rng::seed_from_u64(seed) }
        }

        fn sender(&self, i: u8) -> String {
            self.senders[i as usize % self.senders.len()].clone()
        }

        fn send(&mut self, d: Datagram) -> usize {
            let out = poke(&mut self.w.rs, self.now_ms, d);
            out.iter().filter(|o| is_content(o)).count()
        }

        fn post_token(&mut self, from: String, mid: u16, body: Vec<u8>) -> usize {
            let env = Envelope::request(Code::Post, PATH_AUTHZ_INFO, mid, body);
            let to = self.w.rs.endpoint.name.clone();
            self.send(plain(&from, &to, &env))
        }

        /// Plays one move. Returns how many resource responses came back.
        pub fn play(&mut self, m: &Move) -> usize {
            let to = self.w.rs.endpoint.name.clone();
            match m {
                Move::Get { from, path, mid } => {
                    let p = ["/temp", "/x", "/authz-info"][*path as usize % 3];
                    let env = Envelope::request(Code::Get, p, *mid, vec![]);
                    self.send(plain(&self.sender(*from), &to, &env))
                }
                Move::Garbage { from, bytes } => {
                    let d = Datagram { from: self.sender(*from), to, protocol: Protocol::Plain, bytes: bytes.clone() };
                    self.send(d)
                }
                Move::ForgedToken { from, mid } => {
                    let mut t = self.claims.clone();
                    t.client_id = self.sender(*from);
                    let key = AeadKey::random(&mut self.rng);
                    let body = seal_token(&t, &key, &mut self.rng).unwrap();
                    self.post_token(self.sender(*from), *mid, body)
                }
                Move::CapturedToken { from, mid, flip } => {
                    let mut body = self.captured.clone();
                    if let Some(f) = flip {
                        let bit = *f as usize % (body.len() * 8);
                        body[bit / 8] ^= 1 << (bit % 8);
                    }
                    self.post_token(self.sender(*from), *mid, body)
                }
                Move::Ike { from, mid, bytes } => {
                    let env = Envelope::request(Code::Post, ace_ipsec::actors::PATH_IKE, *mid, bytes.clone());
                    self.send(plain(&self.sender(*from), &to, &env))
                }
                Move::Esp { from, spi, seq, bytes } => {
                    let known: Vec<u32> = self.w.rs.endpoint.sa_db.inbound_spis().collect();
                    let spi = if known.is_empty() || *spi < 64 {
                        self.rng.next_u32()
                    } else {
                        known[*spi as usize % known.len()]
                    };
                    let mut iv8 = [0u8; 8];
                    iv8[4..].copy_from_slice(&seq.to_be_bytes());
                    let pkt = EspPacket { spi, seq: *seq, iv8, ciphertext: bytes.clone() };
                    let d = Datagram { from: self.sender(*from), to, protocol: Protocol::Esp, bytes: pkt.to_bytes() };
                    self.send(d)
                }
                Move::Wait { ms } => {
                    self.now_ms += *ms as u64 * 10;
                    let mut out = Vec::new();
                    self.w.rs.tick(self.now_ms, &mut out);
                    let _ = self.rng.gen::<u8>();
                    out.iter().filter(|o| is_content(o)).count()
                }
            }
        }

        pub fn served(&self) -> u64 {
            self.w.rs.stats.resources_served
        }
    }

    /// Moves for `proptest`. Captured tokens are left out for Base, where a
    /// token is a bearer credential.
    pub fn moves(with_captured: bool) -> impl proptest::strategy::Strategy<Value = Move> {
        use proptest::prelude::*;
        let bytes = proptest::collection::vec(any::<u8>(), 0..64);
        let captured = if with_captured { 1u32 } else { 0 };
        prop_oneof![
            3 => (any::<u8>(), any::<u8>(), any::<u16>()).prop_map(|(from, path, mid)| Move::Get { from, path, mid }),
            1 => (any::<u8>(), bytes.clone()).prop_map(|(from, bytes)| Move::Garbage { from, bytes }),
            2 => (any::<u8>(), any::<u16>()).prop_map(|(from, mid)| Move::ForgedToken { from, mid }),
            2 * captured => (any::<u8>(), any::<u16>(), proptest::option::of(any::<u16>()))
                .prop_map(|(from, mid, flip)| Move::CapturedToken { from, mid, flip }),
            1 => (any::<u8>(), any::<u16>(), bytes.clone()).prop_map(|(from, mid, bytes)| Move::Ike { from, mid, bytes }),
            2 => (any::<u8>(), any::<u8>(), any::<u32>(), bytes).prop_map(|(from, spi, seq, bytes)| Move::Esp { from, spi, seq, bytes }),
            1 => any::<u16>().prop_map(|ms| Move::Wait { ms }),
        ]
    }
}

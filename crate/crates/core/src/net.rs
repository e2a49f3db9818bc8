//! Datagram transports: a seeded in-memory network with virtual time and a
//! UDP loopback adapter. Both record a trace of every message sent.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::{SocketAddr, UdpSocket};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_MTU: usize = 1280;
/// Prefix that marks a non-ESP datagram on UDP, like the non-ESP marker of
/// UDP-encapsulated ESP. Real SPIs are never zero.
const NON_ESP_MARKER: [u8; 4] = [0; 4];

#[derive(Debug, Error)]
pub enum NetError {
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error("endpoint {0:?} registered twice")]
    Duplicate(String),
    #[error("socket error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Plain,
    Esp,
}

/// A message handed to or received from a transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub from: String,
    pub to: String,
    pub protocol: Protocol,
    pub bytes: Vec<u8>,
}

/// Sender-side accounting attached to each send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendMeta {
    pub step: String,
    /// Length of the framed envelope inside, before any ESP processing.
    pub coap_bytes: usize,
    pub retransmission: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub step_label: String,
    pub from: String,
    pub to: String,
    pub protocol: Protocol,
    pub bytes_on_wire: usize,
    pub coap_bytes: usize,
    pub fragments: usize,
    pub retransmission: bool,
    pub delivered: bool,
    pub timestamp_ms: u64,
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

pub fn fragment_count(len: usize, mtu: usize) -> usize {
    len.div_ceil(mtu.max(1)).max(1)
}

pub trait Transport {
    fn register(&mut self, node: &str) -> Result<(), NetError>;
    fn send(&mut self, now_ms: u64, d: Datagram, meta: SendMeta) -> Result<(), NetError>;
    /// Messages for `node` whose delivery time is `<= now_ms`.
    fn poll(&mut self, node: &str, now_ms: u64) -> Result<Vec<Datagram>, NetError>;
    /// Time of the next pending delivery, if the transport knows it.
    fn next_event_ms(&self) -> Option<u64>;
    /// True when time only advances through the caller.
    fn virtual_time(&self) -> bool;
    fn trace(&self) -> &[TraceRecord];
    /// Current time for transports that run on the wall clock.
    fn clock_ms(&self) -> Option<u64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum Latency {
    Fixed(u64),
    Uniform { min: u64, max: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub loss_rate: f64,
    pub latency_ms: Latency,
    pub reorder: bool,
    pub rng_seed: u64,
    pub mtu: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            loss_rate: 0.0,
            latency_ms: Latency::Fixed(10),
            reorder: false,
            rng_seed: 0,
            mtu: DEFAULT_MTU,
        }
    }
}

#[derive(Debug)]
struct InFlight {
    deliver_at: u64,
    order: u64,
    datagram: Datagram,
}

/// Deterministic simulated network.
#[derive(Debug)]
pub struct SimNetwork {
    cfg: SimConfig,
    rng: ChaCha20Rng,
    nodes: BTreeMap<String, Vec<InFlight>>,
    last_on_link: HashMap<(String, String), u64>,
    order: u64,
    trace: Vec<TraceRecord>,
}

impl SimNetwork {
    pub fn new(cfg: SimConfig) -> Self {
        SimNetwork {
            rng: ChaCha20Rng::seed_from_u64(cfg.rng_seed),
            cfg,
            nodes: BTreeMap::new(),
            last_on_link: HashMap::new(),
            order: 0,
            trace: Vec::new(),
        }
    }

    fn latency(&mut self) -> u64 {
        match self.cfg.latency_ms {
            Latency::Fixed(ms) => ms,
            Latency::Uniform { min, max } if max > min => self.rng.gen_range(min..=max),
            Latency::Uniform { min, .. } => min,
        }
    }
}

impl Transport for SimNetwork {
    fn register(&mut self, node: &str) -> Result<(), NetError> {
        if self.nodes.contains_key(node) {
            return Err(NetError::Duplicate(node.into()));
        }
        self.nodes.insert(node.into(), Vec::new());
        Ok(())
    }

    fn send(&mut self, now_ms: u64, d: Datagram, meta: SendMeta) -> Result<(), NetError> {
        for n in [&d.from, &d.to] {
            if !self.nodes.contains_key(n) {
                return Err(NetError::UnknownEndpoint(n.clone()));
            }
        }
        let fragments = fragment_count(d.bytes.len(), self.cfg.mtu);
        // Each fragment is lost independently; the message survives only if
        // every fragment does. The latest fragment sets the delivery time.
        let mut delivered = true;
        let mut arrival = now_ms;
        for _ in 0..fragments {
            let lost = self.cfg.loss_rate > 0.0 && self.rng.gen::<f64>() < self.cfg.loss_rate;
            let at = now_ms + self.latency();
            delivered &= !lost;
            arrival = arrival.max(at);
        }
        self.trace.push(TraceRecord {
            step_label: meta.step,
            from: d.from.clone(),
            to: d.to.clone(),
            protocol: d.protocol,
            bytes_on_wire: d.bytes.len(),
            coap_bytes: meta.coap_bytes,
            fragments,
            retransmission: meta.retransmission,
            delivered,
            timestamp_ms: now_ms,
            bytes: d.bytes.clone(),
        });
        if !delivered {
            return Ok(());
        }
        if !self.cfg.reorder {
            let link = (d.from.clone(), d.to.clone());
            let last = self.last_on_link.get(&link).copied().unwrap_or(0);
            arrival = arrival.max(last);
            self.last_on_link.insert(link, arrival);
        }
        self.order += 1;
        let order = self.order;
        self.nodes
            .get_mut(&d.to)
            .expect("checked above")
            .push(InFlight {
                deliver_at: arrival,
                order,
                datagram: d,
            });
        Ok(())
    }

    fn poll(&mut self, node: &str, now_ms: u64) -> Result<Vec<Datagram>, NetError> {
        let q = self
            .nodes
            .get_mut(node)
            .ok_or_else(|| NetError::UnknownEndpoint(node.into()))?;
        let (mut due, rest): (Vec<_>, Vec<_>) = q.drain(..).partition(|f| f.deliver_at <= now_ms);
        *q = rest;
        due.sort_by_key(|f| (f.deliver_at, f.order));
        Ok(due.into_iter().map(|f| f.datagram).collect())
    }

    fn next_event_ms(&self) -> Option<u64> {
        self.nodes.values().flatten().map(|f| f.deliver_at).min()
    }

    fn virtual_time(&self) -> bool {
        true
    }

    fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }
}

/// UDP on 127.0.0.1, one socket per node.
#[derive(Debug)]
pub struct UdpNetwork {
    sockets: BTreeMap<String, UdpSocket>,
    by_addr: HashMap<SocketAddr, String>,
    ports: HashMap<String, u16>,
    mtu: usize,
    start: Instant,
    trace: Vec<TraceRecord>,
    inbox: HashMap<String, VecDeque<Datagram>>,
}

impl UdpNetwork {
    /// `ports` pins nodes to ports; other nodes get an ephemeral port.
    pub fn new(ports: HashMap<String, u16>, mtu: usize) -> Self {
        UdpNetwork {
            sockets: BTreeMap::new(),
            by_addr: HashMap::new(),
            ports,
            mtu,
            start: Instant::now(),
            trace: Vec::new(),
            inbox: HashMap::new(),
        }
    }

    pub fn local_addr(&self, node: &str) -> Option<SocketAddr> {
        self.sockets.get(node).and_then(|s| s.local_addr().ok())
    }

    /// Milliseconds since the network was created.
    pub fn elapsed_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn drain_socket(&mut self, node: &str) -> Result<(), NetError> {
        let sock = self
            .sockets
            .get(node)
            .ok_or_else(|| NetError::UnknownEndpoint(node.into()))?;
        let mut buf = vec![0u8; 65_536];
        loop {
            match sock.recv_from(&mut buf) {
                Ok((n, src)) => {
                    let Some(from) = self.by_addr.get(&src).cloned() else {
                        log::warn!("datagram from unregistered {src}");
                        continue;
                    };
                    let raw = &buf[..n];
                    let (protocol, bytes) = if raw.len() >= 4 && raw[..4] == NON_ESP_MARKER {
                        (Protocol::Plain, raw[4..].to_vec())
                    } else {
                        (Protocol::Esp, raw.to_vec())
                    };
                    self.inbox.entry(node.into()).or_default().push_back(Datagram {
                        from,
                        to: node.into(),
                        protocol,
                        bytes,
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Transport for UdpNetwork {
    fn register(&mut self, node: &str) -> Result<(), NetError> {
        if self.sockets.contains_key(node) {
            return Err(NetError::Duplicate(node.into()));
        }
        let port = self.ports.get(node).copied().unwrap_or(0);
        let sock = UdpSocket::bind(("127.0.0.1", port))?;
        sock.set_nonblocking(true)?;
        self.by_addr.insert(sock.local_addr()?, node.into());
        self.sockets.insert(node.into(), sock);
        Ok(())
    }

    fn send(&mut self, now_ms: u64, d: Datagram, meta: SendMeta) -> Result<(), NetError> {
        let dest = self
            .local_addr(&d.to)
            .ok_or_else(|| NetError::UnknownEndpoint(d.to.clone()))?;
        let sock = self
            .sockets
            .get(&d.from)
            .ok_or_else(|| NetError::UnknownEndpoint(d.from.clone()))?;
        let mut wire = Vec::with_capacity(d.bytes.len() + 4);
        if d.protocol == Protocol::Plain {
            wire.extend_from_slice(&NON_ESP_MARKER);
        }
        wire.extend_from_slice(&d.bytes);
        sock.send_to(&wire, dest)?;
        self.trace.push(TraceRecord {
            step_label: meta.step,
            from: d.from,
            to: d.to,
            protocol: d.protocol,
            bytes_on_wire: d.bytes.len(),
            coap_bytes: meta.coap_bytes,
            fragments: fragment_count(d.bytes.len(), self.mtu),
            retransmission: meta.retransmission,
            delivered: true,
            timestamp_ms: now_ms,
            bytes: d.bytes,
        });
        Ok(())
    }

    fn poll(&mut self, node: &str, _now_ms: u64) -> Result<Vec<Datagram>, NetError> {
        self.drain_socket(node)?;
        Ok(self
            .inbox
            .get_mut(node)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default())
    }

    fn next_event_ms(&self) -> Option<u64> {
        None
    }

    fn virtual_time(&self) -> bool {
        false
    }

    fn clock_ms(&self) -> Option<u64> {
        Some(self.elapsed_ms())
    }

    fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }
}

/// Per-step totals over one trace.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StepTotals {
    /// Sum of `coap_bytes` over first transmissions.
    pub bytes: usize,
    pub msgs: usize,
    pub frags: usize,
    pub retx: usize,
    /// Sum of `bytes_on_wire` over all transmissions.
    pub wire_bytes: usize,
}

pub fn summarize(trace: &[TraceRecord]) -> BTreeMap<String, StepTotals> {
    let mut out: BTreeMap<String, StepTotals> = BTreeMap::new();
    for r in trace {
        let t = out.entry(r.step_label.clone()).or_default();
        t.wire_bytes += r.bytes_on_wire;
        t.frags += r.fragments;
        if r.retransmission {
            t.retx += 1;
        } else {
            t.bytes += r.coap_bytes;
            t.msgs += 1;
        }
    }
    out
}
